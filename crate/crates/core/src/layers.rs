//! Trainable building blocks with hand-written backward passes.
//!
//! Layers take `&self` on the forward pass and return an explicit cache; the
//! backward pass takes `&mut self` and accumulates into each [`Param::grad`].
//! Nothing here depends on batch statistics, so a batch is just a loop over
//! samples with gradients summed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::{col2im, gemm, im2col, ConvGeometry, MatRef, Padding, Tensor3};

/// A named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape");
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n])
    }

    pub fn normal(
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        Self::new(name, shape, (0..n).map(|_| dist.sample(rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters, visited in a fixed, deterministic order.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// SHA-256 over every parameter's name, shape and little-endian values.
    fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit_params(&mut |p| {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    fn grads_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |p| ok &= p.grad.iter().all(|g| g.is_finite()));
        ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * geometry.kernel * geometry.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::normal(format!("{name}.weight"), vec![out_channels, fan_in], std, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels]),
            in_channels,
            out_channels,
            geometry,
        }
    }

    /// 3x3, stride 2, zero padding 1: halves the spatial size.
    pub fn downsampling(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let g = ConvGeometry {
            kernel: 3,
            stride: 2,
            pad: 1,
            padding: Padding::Zero,
        };
        Self::new(name, cin, cout, g, rng)
    }

    pub fn pointwise(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let g = ConvGeometry {
            kernel: 1,
            stride: 1,
            pad: 0,
            padding: Padding::Zero,
        };
        Self::new(name, cin, cout, g, rng)
    }

    pub fn forward(&self, x: &Tensor3) -> (Tensor3, ConvCache) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (cols, ho, wo) = im2col(x, self.geometry);
        let n = ho * wo;
        let fan_in = self.weight.shape[1];
        let mut y = vec![0.0; self.out_channels * n];
        for (o, row) in y.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        gemm(
            1.0,
            MatRef::new(&self.weight.value, self.out_channels, fan_in),
            MatRef::new(&cols, fan_in, n),
            1.0,
            &mut y,
        );
        let cache = ConvCache {
            cols,
            in_shape: x.shape(),
            out_hw: (ho, wo),
        };
        (Tensor3::from_vec(self.out_channels, ho, wo, y), cache)
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor3, need_dx: bool) -> Option<Tensor3> {
        let n = cache.out_hw.0 * cache.out_hw.1;
        let fan_in = self.weight.shape[1];
        assert_eq!(dy.data.len(), self.out_channels * n);
        for (o, row) in dy.data.chunks(n).enumerate() {
            self.bias.grad[o] += row.iter().sum::<f64>();
        }
        gemm(
            1.0,
            MatRef::new(&dy.data, self.out_channels, n),
            MatRef::new(&cache.cols, fan_in, n).t(),
            1.0,
            &mut self.weight.grad,
        );
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0; fan_in * n];
        gemm(
            1.0,
            MatRef::new(&self.weight.value, self.out_channels, fan_in).t(),
            MatRef::new(&dy.data, self.out_channels, n),
            0.0,
            &mut dcols,
        );
        Some(col2im(&dcols, cache.in_shape, self.geometry))
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Per-sample normalization over the whole `[C, H, W]` map with a per-channel
/// affine. Independent of batch composition, so evaluation is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Tensor3,
    inv_std: f64,
}

impl LayerNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor3) -> (Tensor3, NormCache) {
        let n = x.data.len() as f64;
        let mean = x.data.iter().sum::<f64>() / n;
        let var = x.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + self.eps).sqrt();
        let xhat = x.map(|v| (v - mean) * inv_std);
        let mut y = xhat.clone();
        for c in 0..y.channels {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            y.plane_mut(c).iter_mut().for_each(|v| *v = g * *v + b);
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache, dy: &Tensor3) -> Tensor3 {
        let xhat = &cache.xhat;
        let mut dxhat = dy.clone();
        for c in 0..dy.channels {
            let (dyp, xp) = (dy.plane(c), xhat.plane(c));
            self.gamma.grad[c] += dyp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
            self.beta.grad[c] += dyp.iter().sum::<f64>();
            let g = self.gamma.value[c];
            dxhat.plane_mut(c).iter_mut().for_each(|v| *v *= g);
        }
        let n = dxhat.data.len() as f64;
        let sum_d = dxhat.data.iter().sum::<f64>();
        let sum_dx = dxhat.data.iter().zip(&xhat.data).map(|(a, b)| a * b).sum::<f64>();
        let k = cache.inv_std / n;
        let data = dxhat
            .data
            .iter()
            .zip(&xhat.data)
            .map(|(d, xh)| k * (n * d - sum_d - xh * sum_dx))
            .collect();
        Tensor3::from_vec(dy.channels, dy.height, dy.width, data)
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Tensor3, dy: &Tensor3) -> Tensor3 {
    let data = y
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&o, &d)| if o > 0.0 { d } else { 0.0 })
        .collect();
    Tensor3::from_vec(dy.channels, dy.height, dy.width, data)
}

/// Dense affine map on vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Self {
            weight: Param::normal(format!("{name}.weight"), vec![out_dim, in_dim], std, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), vec![out_dim, in_dim]),
            bias: Param::zeros(format!("{name}.bias"), vec![out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim, "linear input dim");
        let mut y = self.bias.value.clone();
        gemm(
            1.0,
            MatRef::new(&self.weight.value, self.out_dim, self.in_dim),
            MatRef::new(x, self.in_dim, 1),
            1.0,
            &mut y,
        );
        y
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        for (o, &d) in dy.iter().enumerate() {
            self.bias.grad[o] += d;
            let row = &mut self.weight.grad[o * self.in_dim..(o + 1) * self.in_dim];
            row.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
        }
        let mut dx = vec![0.0; self.in_dim];
        gemm(
            1.0,
            MatRef::new(&self.weight.value, self.out_dim, self.in_dim).t(),
            MatRef::new(dy, self.out_dim, 1),
            0.0,
            &mut dx,
        );
        dx
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    // Scalar probe: L = <y, r> for a fixed random r.
    fn probe(y: &Tensor3, r: &Tensor3) -> f64 {
        crate::tensor::dot(&y.data, &r.data)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::downsampling("c", 2, 3, &mut rng);
        conv.bias.value = vec![0.1, -0.2, 0.3];
        let x = rand_map(2, 6, 6, 2);
        let (y, cache) = conv.forward(&x);
        let r = rand_map(y.channels, y.height, y.width, 3);
        let dx = conv.backward(&cache, &r, true).unwrap();
        let h = 1e-6;
        for i in [0usize, 7, 20, 53] {
            let mut c2 = conv.clone();
            c2.weight.value[i] += h;
            let up = probe(&c2.forward(&x).0, &r);
            c2.weight.value[i] -= 2.0 * h;
            let dn = probe(&c2.forward(&x).0, &r);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - conv.weight.grad[i]).abs() < 1e-6, "w[{i}] {fd} vs {}", conv.weight.grad[i]);
        }
        for i in [0usize, 11, 40, 71] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = probe(&conv.forward(&xp).0, &r);
            xp.data[i] -= 2.0 * h;
            let dn = probe(&conv.forward(&xp).0, &r);
            assert!(((up - dn) / (2.0 * h) - dx.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut ln = LayerNorm::new("n", 3);
        ln.gamma.value = vec![0.5, 1.5, -0.7];
        ln.beta.value = vec![0.1, 0.0, 0.2];
        let x = rand_map(3, 4, 4, 5);
        let (y, cache) = ln.forward(&x);
        let r = rand_map(3, 4, 4, 6);
        let dx = ln.backward(&cache, &r);
        let h = 1e-6;
        for i in [0usize, 9, 25, 47] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = probe(&ln.forward(&xp).0, &r);
            xp.data[i] -= 2.0 * h;
            let dn = probe(&ln.forward(&xp).0, &r);
            assert!(((up - dn) / (2.0 * h) - dx.data[i]).abs() < 1e-6);
        }
        let mut l2 = ln.clone();
        l2.gamma.value[1] += h;
        let up = probe(&l2.forward(&x).0, &r);
        l2.gamma.value[1] -= 2.0 * h;
        let dn = probe(&l2.forward(&x).0, &r);
        assert!(((up - dn) / (2.0 * h) - ln.gamma.grad[1]).abs() < 1e-6);
        assert!(y.is_finite());
    }

    #[test]
    fn linear_backward_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lin = Linear::new("l", 4, 2, &mut rng);
        let x = [0.5, -1.0, 2.0, 0.25];
        let y = lin.forward(&x);
        for o in 0..2 {
            let manual: f64 = (0..4).map(|i| lin.weight.value[o * 4 + i] * x[i]).sum::<f64>() + lin.bias.value[o];
            assert!((manual - y[o]).abs() < 1e-12);
        }
        let dx = lin.backward(&x, &[1.0, -2.0]);
        for i in 0..4 {
            let manual = lin.weight.value[i] - 2.0 * lin.weight.value[4 + i];
            assert!((dx[i] - manual).abs() < 1e-12);
        }
        assert_eq!(lin.bias.grad, vec![1.0, -2.0]);
    }

    #[test]
    fn digest_changes_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new("l", 3, 1, &mut rng);
        let d0 = lin.param_digest();
        assert_eq!(d0, lin.param_digest());
        lin.bias.value[0] += 1e-12;
        assert_ne!(d0, lin.param_digest());
    }
}
