//! Channel-attention enhancement and hybrid fusion of redundant features
//! into the discriminator stream.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::layers::{Conv2d, ConvCache, Linear, Param, Parameterized};
use crate::tensor::{sigmoid, Tensor3};

pub const REDUCTION: usize = 4;
const FUSE_INIT_STD: f64 = 0.01;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScamError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

fn same_shape(a: &Tensor3, b: &Tensor3, what: &str) -> Result<(), ScamError> {
    if a.shape() != b.shape() {
        return Err(ScamError::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// 1x1 fusion `[C_out, 2C]` initialised to pass the second half through
/// (identity) and to nearly ignore the first half.
fn near_identity_fuse(name: &str, channels: usize, rng: &mut impl Rng) -> Conv2d {
    let mut conv = Conv2d::pointwise(name, 2 * channels, channels, rng);
    let noise = Normal::new(0.0, FUSE_INIT_STD).expect("std");
    for o in 0..channels {
        for i in 0..2 * channels {
            let base = if i == channels + o { 1.0 } else { 0.0 };
            conv.weight.value[o * 2 * channels + i] = base + noise.sample(rng);
        }
    }
    conv
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScamStage {
    pub channels: usize,
    /// Shared bottleneck `C -> C/r -> C` applied to both pooled vectors.
    pub fc1: Linear,
    pub fc2: Linear,
    pub fuse: Conv2d,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    mean: Vec<f64>,
    max: Vec<f64>,
    argmax: Vec<usize>,
    hidden_mean: Vec<f64>,
    hidden_max: Vec<f64>,
    pub sc: Vec<f64>,
    hw: usize,
}

#[derive(Debug, Clone)]
pub struct ScamCache {
    attention: AttentionCache,
    v_sub: Tensor3,
    fuse: ConvCache,
}

impl ScamStage {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / REDUCTION).max(1);
        Self {
            channels,
            fc1: Linear::new(&format!("{name}.fc1"), channels, hidden, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, channels, rng),
            fuse: near_identity_fuse(&format!("{name}.fuse"), channels, rng),
        }
    }

    fn check(&self, v: &Tensor3) -> Result<(), ScamError> {
        if v.channels != self.channels {
            return Err(ScamError::ShapeMismatch(format!(
                "stage has {} channels, input has {}",
                self.channels, v.channels
            )));
        }
        Ok(())
    }

    fn transform(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden: Vec<f64> = self.fc1.forward(v).into_iter().map(|x| x.max(0.0)).collect();
        (self.fc2.forward(&hidden), hidden)
    }

    pub fn attention_cached(&self, v_sub: &Tensor3) -> Result<AttentionCache, ScamError> {
        self.check(v_sub)?;
        let hw = v_sub.plane_len();
        let mut mean = Vec::with_capacity(self.channels);
        let mut max = Vec::with_capacity(self.channels);
        let mut argmax = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let p = v_sub.plane(c);
            mean.push(p.iter().sum::<f64>() / hw as f64);
            let (mut bi, mut bv) = (0, p[0]);
            for (i, &v) in p.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            max.push(bv);
            argmax.push(bi);
        }
        let (t_mean, hidden_mean) = self.transform(&mean);
        let (t_max, hidden_max) = self.transform(&max);
        let sc = t_mean.iter().zip(&t_max).map(|(a, b)| sigmoid(a + b)).collect();
        Ok(AttentionCache {
            mean,
            max,
            argmax,
            hidden_mean,
            hidden_max,
            sc,
            hw,
        })
    }

    /// Full fusion with the state needed for [`ScamStage::backward`].
    pub fn forward_cached(&self, v_red: &Tensor3, v_sub: &Tensor3) -> Result<(Tensor3, ScamCache), ScamError> {
        same_shape(v_red, v_sub, "redundant vs discriminator map")?;
        let attention = self.attention_cached(v_sub)?;
        let v_sc = enhance(v_sub, &attention.sc)?;
        let (v_aug, fuse) = self.fuse.forward(&Tensor3::concat_channels(v_red, &v_sc));
        Ok((
            v_aug,
            ScamCache {
                attention,
                v_sub: v_sub.clone(),
                fuse,
            },
        ))
    }

    fn transform_backward(&mut self, input: &[f64], hidden: &[f64], dout: &[f64]) -> Vec<f64> {
        let mut dh = self.fc2.backward(hidden, dout);
        dh.iter_mut().zip(hidden).for_each(|(d, h)| {
            if *h <= 0.0 {
                *d = 0.0
            }
        });
        self.fc1.backward(input, &dh)
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. `v_sub`.
    /// The redundant map is treated as a constant.
    pub fn backward(&mut self, cache: &ScamCache, dv_aug: &Tensor3) -> Tensor3 {
        let c = self.channels;
        let dcat = self.fuse.backward(&cache.fuse, dv_aug, true).expect("dx requested");
        let v_sub = &cache.v_sub;
        let sc = &cache.attention.sc;
        let mut dv_sub = Tensor3::zeros(c, v_sub.height, v_sub.width);
        let mut dz = vec![0.0; c];
        for ch in 0..c {
            let dsc_plane = dcat.plane(c + ch);
            let vp = v_sub.plane(ch);
            let dsc: f64 = dsc_plane.iter().zip(vp).map(|(a, b)| a * b).sum();
            dz[ch] = dsc * sc[ch] * (1.0 - sc[ch]);
            let k = 1.0 + sc[ch];
            dv_sub
                .plane_mut(ch)
                .iter_mut()
                .zip(dsc_plane)
                .for_each(|(d, g)| *d = g * k);
        }
        let a = &cache.attention;
        let dmean = self.transform_backward(&a.mean, &a.hidden_mean, &dz);
        let dmax = self.transform_backward(&a.max, &a.hidden_max, &dz);
        for ch in 0..c {
            let g = dmean[ch] / a.hw as f64;
            let p = dv_sub.plane_mut(ch);
            p.iter_mut().for_each(|d| *d += g);
            p[a.argmax[ch]] += dmax[ch];
        }
        dv_sub
    }
}

impl Parameterized for ScamStage {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
        self.fuse.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
        self.fuse.visit_params_mut(f);
    }
}

/// `sc = sigmoid(T(mean_pool(v)) + T(max_pool(v)))`, one entry per channel.
pub fn channel_attention(stage: &ScamStage, v_sub: &Tensor3) -> Result<Vec<f64>, ScamError> {
    stage.attention_cached(v_sub).map(|c| c.sc)
}

/// `v_sc = v_sub + sc * v_sub`, broadcast over space.
pub fn enhance(v_sub: &Tensor3, sc: &[f64]) -> Result<Tensor3, ScamError> {
    if sc.len() != v_sub.channels {
        return Err(ScamError::ShapeMismatch(format!(
            "{} attention weights for {} channels",
            sc.len(),
            v_sub.channels
        )));
    }
    let mut out = v_sub.clone();
    for (ch, s) in sc.iter().enumerate() {
        out.plane_mut(ch).iter_mut().for_each(|v| *v += s * *v);
    }
    Ok(out)
}

/// `v_aug = conv1x1(concat(v_red, v_sc))`.
pub fn fuse_hybrid(stage: &ScamStage, v_red: &Tensor3, v_sc: &Tensor3) -> Result<Tensor3, ScamError> {
    stage.check(v_sc)?;
    same_shape(v_red, v_sc, "redundant vs enhanced map")?;
    Ok(stage.fuse.forward(&Tensor3::concat_channels(v_red, v_sc)).0)
}

pub fn scam_forward(stage: &ScamStage, v_red: &Tensor3, v_sub: &Tensor3) -> Result<Tensor3, ScamError> {
    stage.forward_cached(v_red, v_sub).map(|(v, _)| v)
}

/// Attention-free fusion: `conv1x1(concat(v_red, v_sub))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainFusion {
    pub channels: usize,
    pub fuse: Conv2d,
}

impl PlainFusion {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            channels,
            fuse: near_identity_fuse(&format!("{name}.fuse"), channels, rng),
        }
    }

    pub fn forward_cached(&self, v_red: &Tensor3, v_sub: &Tensor3) -> Result<(Tensor3, ConvCache), ScamError> {
        same_shape(v_red, v_sub, "redundant vs discriminator map")?;
        if v_sub.channels != self.channels {
            return Err(ScamError::ShapeMismatch(format!("expected {} channels", self.channels)));
        }
        Ok(self.fuse.forward(&Tensor3::concat_channels(v_red, v_sub)))
    }

    pub fn backward(&mut self, cache: &ConvCache, dv: &Tensor3) -> Tensor3 {
        let dcat = self.fuse.backward(cache, dv, true).expect("dx requested");
        let c = self.channels;
        Tensor3::from_vec(c, dcat.height, dcat.width, dcat.data[c * dcat.plane_len()..].to_vec())
    }
}

impl Parameterized for PlainFusion {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.fuse.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fuse.visit_params_mut(f);
    }
}
