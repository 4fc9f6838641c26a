//! Micro-backbones for the redundant extractor, the forgery discriminator and
//! the auxiliary discriminator, plus single-logit classification heads.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::layers::{relu, relu_backward, Conv2d, ConvCache, LayerNorm, Linear, NormCache, Param, Parameterized};
use crate::rng::derive_rng;
use crate::tensor::{sigmoid, Tensor3};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error("expected input with {expected} channels and side >= {min_side}, got {found:?}")]
    ShapeMismatch {
        expected: usize,
        min_side: usize,
        found: (usize, usize, usize),
    },
    #[error("stage index {0} out of range (stages are numbered from 1)")]
    StageIndexOutOfRange(usize),
    #[error("feature length {found} does not match head input {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("bad backbone config: {0}")]
    BadConfig(String),
    #[error("extractor must be frozen")]
    NotFrozen,
    #[error("weight import: {0}")]
    Import(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stages: usize,
    pub widths: Vec<usize>,
    pub input_channels: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.stages == 0 || self.widths.len() != self.stages {
            return Err(NetError::BadConfig(format!(
                "{} stages but {} widths",
                self.stages,
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) || self.input_channels == 0 || self.feature_dim == 0 {
            return Err(NetError::BadConfig("widths and dims must be positive".into()));
        }
        Ok(())
    }
}

/// Per-stage feature maps and the projected pooled vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub stage_maps: Vec<Tensor3>,
    pub final_features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct StageCache {
    conv: ConvCache,
    norm: NormCache,
    out: Tensor3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
    pub proj: Linear,
    pub frozen: bool,
}

impl Backbone {
    /// `name` prefixes every parameter name; `stream` separates the
    /// initialisation stream of backbones sharing a seed.
    pub fn new(name: &str, config: BackboneConfig, stream: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, &[stream]);
        let mut cin = config.input_channels;
        let mut stages = Vec::with_capacity(config.stages);
        for (i, &w) in config.widths.iter().enumerate() {
            let prefix = format!("{name}.stage{}", i + 1);
            stages.push(Stage {
                conv: Conv2d::downsampling(&format!("{prefix}.conv"), cin, w, &mut rng),
                norm: LayerNorm::new(&format!("{prefix}.norm"), w),
            });
            cin = w;
        }
        let proj = Linear::new(&format!("{name}.proj"), cin, config.feature_dim, &mut rng);
        Ok(Self {
            config,
            stages,
            proj,
            frozen: false,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn check_input(&self, x: &Tensor3) -> Result<(), NetError> {
        let min_side = 1 << self.stages.len();
        if x.channels != self.config.input_channels || x.height < min_side || x.width < min_side {
            return Err(NetError::ShapeMismatch {
                expected: self.config.input_channels,
                min_side,
                found: x.shape(),
            });
        }
        Ok(())
    }

    /// conv 3x3 stride 2 -> per-sample norm -> ReLU. `i` is 0-based.
    pub fn stage_forward(&self, i: usize, x: &Tensor3) -> (Tensor3, StageCache) {
        let s = &self.stages[i];
        let (z, conv) = s.conv.forward(x);
        let (n, norm) = s.norm.forward(&z);
        let out = relu(&n);
        (out.clone(), StageCache { conv, norm, out })
    }

    pub fn stage_backward(&mut self, i: usize, cache: &StageCache, dy: &Tensor3, need_dx: bool) -> Option<Tensor3> {
        let s = &mut self.stages[i];
        let dn = relu_backward(&cache.out, dy);
        let dz = s.norm.backward(&cache.norm, &dn);
        s.conv.backward(&cache.conv, &dz, need_dx)
    }

    /// Global average pool followed by the projection.
    pub fn project(&self, map: &Tensor3) -> (Vec<f64>, Vec<f64>) {
        let pooled = global_avg_pool(map);
        (self.proj.forward(&pooled), pooled)
    }

    pub fn project_backward(&mut self, pooled: &[f64], map_shape: (usize, usize, usize), dfinal: &[f64]) -> Tensor3 {
        let dpool = self.proj.backward(pooled, dfinal);
        let (c, h, w) = map_shape;
        let scale = 1.0 / (h * w) as f64;
        let mut d = Tensor3::zeros(c, h, w);
        for (ch, g) in dpool.iter().enumerate() {
            d.plane_mut(ch).iter_mut().for_each(|v| *v = g * scale);
        }
        d
    }

    pub fn forward(&self, x: &Tensor3) -> Result<FeatureStack, NetError> {
        self.forward_injected(x, &mut [])
    }

    /// Plain forward pass in which the map after each listed stage (1-based)
    /// is replaced by the callback's output before flowing onward.
    pub fn forward_injected(
        &self,
        x: &Tensor3,
        injected: &mut [(usize, &mut dyn FnMut(&Tensor3) -> Tensor3)],
    ) -> Result<FeatureStack, NetError> {
        self.check_input(x)?;
        for (s, _) in injected.iter() {
            if *s == 0 || *s > self.stages.len() {
                return Err(NetError::StageIndexOutOfRange(*s));
            }
        }
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for i in 0..self.stages.len() {
            let (mut y, _) = self.stage_forward(i, &cur);
            for (s, f) in injected.iter_mut() {
                if *s == i + 1 {
                    y = f(&y);
                }
            }
            maps.push(y.clone());
            cur = y;
        }
        let (final_features, _) = self.project(&cur);
        Ok(FeatureStack {
            stage_maps: maps,
            final_features,
        })
    }

    /// Maps an external flat little-endian f64 file onto the parameters.
    /// The JSON manifest lists `{"name", "shape"}` entries in file order;
    /// every parameter of this backbone must appear exactly once.
    pub fn import_weights(&mut self, weights: &Path, manifest: &Path) -> Result<(), NetError> {
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            shape: Vec<usize>,
        }
        let err = |e: &dyn std::fmt::Display| NetError::Import(e.to_string());
        let bytes = fs::read(weights).map_err(|e| err(&e))?;
        let text = fs::read_to_string(manifest).map_err(|e| err(&e))?;
        let entries: Vec<Entry> = serde_json::from_str(&text).map_err(|e| err(&e))?;
        if bytes.len() % 8 != 0 {
            return Err(NetError::Import("weight file length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut table: HashMap<String, (Vec<usize>, &[f64])> = HashMap::new();
        let mut off = 0;
        for e in &entries {
            let n: usize = e.shape.iter().product();
            let chunk = values
                .get(off..off + n)
                .ok_or_else(|| NetError::Import(format!("{} runs past end of file", e.name)))?;
            table.insert(e.name.clone(), (e.shape.clone(), chunk));
            off += n;
        }
        if off != values.len() {
            return Err(NetError::Import(format!("{} trailing values", values.len() - off)));
        }
        let mut result = Ok(());
        self.visit_params_mut(&mut |p: &mut Param| {
            if result.is_err() {
                return;
            }
            match table.get(&p.name) {
                Some((shape, v)) if *shape == p.shape => p.value.copy_from_slice(v),
                Some((shape, _)) => {
                    result = Err(NetError::Import(format!("{}: shape {:?} != {:?}", p.name, shape, p.shape)))
                }
                None => result = Err(NetError::Import(format!("{} missing from manifest", p.name))),
            }
        });
        result
    }
}

impl Parameterized for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for s in &self.stages {
            s.conv.visit_params(f);
            s.norm.visit_params(f);
        }
        self.proj.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for s in &mut self.stages {
            s.conv.visit_params_mut(f);
            s.norm.visit_params_mut(f);
        }
        self.proj.visit_params_mut(f);
    }
}

pub fn global_avg_pool(map: &Tensor3) -> Vec<f64> {
    let n = map.plane_len() as f64;
    (0..map.channels).map(|c| map.plane(c).iter().sum::<f64>() / n).collect()
}

/// Features of the frozen redundant extractor.
pub fn extract_red_features(e_red: &Backbone, image: &Tensor3) -> Result<FeatureStack, NetError> {
    if !e_red.frozen {
        return Err(NetError::NotFrozen);
    }
    e_red.forward(image)
}

pub fn forward_dsub(
    d_sub: &Backbone,
    residual_input: &Tensor3,
    injected: Option<&mut [(usize, &mut dyn FnMut(&Tensor3) -> Tensor3)]>,
) -> Result<FeatureStack, NetError> {
    match injected {
        Some(inj) => d_sub.forward_injected(residual_input, inj),
        None => d_sub.forward(residual_input),
    }
}

pub fn forward_daux(d_aux: &Backbone, image: &Tensor3) -> Result<FeatureStack, NetError> {
    d_aux.forward(image)
}

/// Single-logit affine classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub linear: Linear,
}

impl Head {
    pub fn new(name: &str, in_dim: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            linear: Linear::new(name, in_dim, 1, rng),
        }
    }

    pub fn zeros(name: &str, in_dim: usize) -> Self {
        Self {
            linear: Linear::zeros(name, in_dim, 1),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim
    }

    pub fn logit(&self, feature: &[f64]) -> Result<f64, NetError> {
        if feature.len() != self.in_dim() {
            return Err(NetError::DimMismatch {
                expected: self.in_dim(),
                found: feature.len(),
            });
        }
        Ok(self.linear.forward(feature)[0])
    }

    /// Accumulates head gradients for `dlogit`; returns the feature gradient.
    pub fn backward(&mut self, feature: &[f64], dlogit: f64) -> Vec<f64> {
        self.linear.backward(feature, &[dlogit])
    }
}

impl Parameterized for Head {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.linear.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.linear.visit_params_mut(f);
    }
}

pub fn classify(head: &Head, feature: &[f64]) -> Result<f64, NetError> {
    head.logit(feature).map(sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::binary_cls_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(input_channels: usize, widths: &[usize]) -> BackboneConfig {
        BackboneConfig {
            stages: widths.len(),
            widths: widths.to_vec(),
            input_channels,
            feature_dim: 16,
            seed: 3,
        }
    }

    fn random_image(seed: u64, c: usize, side: usize) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_vec(c, side, side, (0..c * side * side).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn stage_sizes_halve() {
        let net = Backbone::new("n", cfg(3, &[4, 4, 4, 4]), 0).unwrap();
        let fs = net.forward(&random_image(1, 3, 64)).unwrap();
        let sides: Vec<_> = fs.stage_maps.iter().map(|m| (m.height, m.width)).collect();
        assert_eq!(sides, vec![(32, 32), (16, 16), (8, 8), (4, 4)]);
        assert_eq!(fs.final_features.len(), 16);
    }

    #[test]
    fn frozen_extractor_is_deterministic() {
        let mut net = Backbone::new("e", cfg(3, &[4, 8]), 0).unwrap();
        let img = random_image(2, 3, 16);
        assert_eq!(extract_red_features(&net, &img), Err(NetError::NotFrozen));
        net.frozen = true;
        let before = net.param_digest();
        let a = extract_red_features(&net, &img).unwrap();
        for _ in 0..100 {
            assert_eq!(extract_red_features(&net, &img).unwrap(), a);
        }
        assert_eq!(net.param_digest(), before);
    }

    #[test]
    fn identity_injection_is_exact_and_zeroing_changes_downstream() {
        let net = Backbone::new("d", cfg(6, &[4, 8, 8]), 0).unwrap();
        let x = random_image(3, 6, 16);
        let plain = forward_dsub(&net, &x, None).unwrap();
        let mut id = |m: &Tensor3| m.clone();
        let same = forward_dsub(&net, &x, Some(&mut [(2, &mut id)])).unwrap();
        assert_eq!(plain, same);
        let mut zero = |m: &Tensor3| Tensor3::zeros(m.channels, m.height, m.width);
        let z = forward_dsub(&net, &x, Some(&mut [(2, &mut zero)])).unwrap();
        assert_eq!(z.stage_maps[0], plain.stage_maps[0]);
        assert_ne!(z.stage_maps[2], plain.stage_maps[2]);
        let mut id2 = |m: &Tensor3| m.clone();
        assert_eq!(
            forward_dsub(&net, &x, Some(&mut [(4, &mut id2)])),
            Err(NetError::StageIndexOutOfRange(4))
        );
    }

    #[test]
    fn default_aux_is_under_ten_percent_of_default_sub() {
        let sub = Backbone::new("s", BackboneConfig { feature_dim: 128, ..cfg(30, &[16, 32, 64, 128]) }, 0).unwrap();
        let aux = Backbone::new("a", BackboneConfig { feature_dim: 128, ..cfg(3, &[8, 16]) }, 0).unwrap();
        assert!((aux.num_params() as f64) < 0.1 * sub.num_params() as f64);
    }

    #[test]
    fn wrong_channels_rejected() {
        let net = Backbone::new("d", cfg(30, &[4]), 0).unwrap();
        assert!(matches!(net.forward(&random_image(1, 3, 8)), Err(NetError::ShapeMismatch { .. })));
    }

    #[test]
    fn head_behaviour() {
        let h = Head::zeros("h", 4);
        assert_eq!(classify(&h, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.5);
        assert!(matches!(classify(&h, &[1.0]), Err(NetError::DimMismatch { .. })));
        let mut h = Head::zeros("h", 1);
        h.linear.bias.value[0] = 20.0;
        assert!(classify(&h, &[0.0]).unwrap() > 0.999999);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Head::new("h", 8, &mut rng);
        let f: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: f64 = h.linear.weight.value.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + h.linear.bias.value[0];
        assert!((classify(&h, &f).unwrap() - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
    }

    #[test]
    fn first_layer_gradient_matches_finite_differences() {
        let mut net = Backbone::new("d", cfg(3, &[4, 6]), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head = Head::new("h", 16, &mut rng);
        let x = random_image(4, 3, 16);
        let loss = |n: &Backbone| {
            let fs = n.forward(&x).unwrap();
            binary_cls_loss(classify(&head, &fs.final_features).unwrap(), 1.0)
        };
        // analytic
        let (y1, c1) = net.stage_forward(0, &x);
        let (y2, c2) = net.stage_forward(1, &y1);
        let (fin, pooled) = net.project(&y2);
        let s = classify(&head, &fin).unwrap();
        let mut hc = head.clone();
        let dfin = hc.backward(&fin, s - 1.0);
        let d2 = net.project_backward(&pooled, y2.shape(), &dfin);
        let d1 = net.stage_backward(1, &c2, &d2, true).unwrap();
        net.stage_backward(0, &c1, &d1, false);
        let grad = net.stages[0].conv.weight.grad.clone();
        for i in [0, 7, 19, 50, 100] {
            let h = 1e-6;
            let mut p = net.clone();
            p.stages[0].conv.weight.value[i] += h;
            let mut m = net.clone();
            m.stages[0].conv.weight.value[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "entry {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn forward_is_finite_on_random_inputs() {
        let net = Backbone::new("d", cfg(3, &[4, 8]), 1).unwrap();
        for s in 0..1000 {
            let fs = net.forward(&random_image(s, 3, 8)).unwrap();
            assert!(fs.final_features.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn weight_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = Backbone::new("e", cfg(3, &[4, 8]), 7).unwrap();
        let mut dst = Backbone::new("e", cfg(3, &[4, 8]), 8).unwrap();
        assert_ne!(src.param_digest(), dst.param_digest());
        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        src.visit_params(&mut |p| {
            bytes.extend(p.value.iter().flat_map(|v| v.to_le_bytes()));
            entries.push(serde_json::json!({ "name": p.name, "shape": p.shape }));
        });
        fs::write(dir.path().join("w.bin"), bytes).unwrap();
        fs::write(dir.path().join("w.json"), serde_json::to_string(&entries).unwrap()).unwrap();
        dst.import_weights(&dir.path().join("w.bin"), &dir.path().join("w.json")).unwrap();
        assert_eq!(src.param_digest(), dst.param_digest());
    }
}
