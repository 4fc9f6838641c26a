//! Synthetic face-proxy dataset with controllable demographic skew and a
//! planted high-frequency forgery fingerprint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    image_from_rgb8, image_to_rgb8, save_image, write_manifest, DataError, DatasetManifest, DemographicKey, Gender,
    Image, Label, ManifestEntry, Method, Race, Sample, Split,
};
use crate::rng::{derive_rng, purpose};
use crate::tensor::Tensor3;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("cannot write to {path}: {message}")]
    UnwritableDir { path: PathBuf, message: String },
    #[error("degenerate config: {0}")]
    DegenerateConfig(String),
    #[error("fingerprint strength must be >= 0, got {0}")]
    NegativeStrength(f64),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_per_split: BTreeMap<Split, usize>,
    pub subgroup_proportions: BTreeMap<DemographicKey, f64>,
    /// Fake fraction used for subgroups absent from `fake_fraction_by_subgroup`.
    pub fake_fraction: f64,
    /// Per-subgroup fake fraction (label/subgroup correlation).
    pub fake_fraction_by_subgroup: BTreeMap<DemographicKey, f64>,
    pub fingerprint_strength: f64,
    /// Per-fake strength is drawn from `strength * [1 - jitter, 1]`.
    pub fingerprint_jitter: f64,
    /// Scales the per-subgroup colour and texture offsets (0 = identical groups).
    pub attribute_signal_strength: f64,
    /// Forgery methods; fakes draw one uniformly. Each has its own fingerprint frequency.
    pub methods: Vec<Method>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_per_split: BTreeMap::from([(Split::Train, 1200), (Split::Val, 400), (Split::Test, 400)]),
            subgroup_proportions: BTreeMap::from([
                (DemographicKey::new(Gender::M, Race::W), 0.8),
                (DemographicKey::new(Gender::F, Race::B), 0.2),
            ]),
            fake_fraction: 0.5,
            fake_fraction_by_subgroup: BTreeMap::new(),
            fingerprint_strength: 0.15,
            fingerprint_jitter: 0.0,
            attribute_signal_strength: 1.0,
            methods: vec![Method::SYNTH],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::DegenerateConfig(m));
        if self.image_size < 16 {
            return bad(format!("image_size {} < 16", self.image_size));
        }
        let sum: f64 = self.subgroup_proportions.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("subgroup proportions sum to {sum}, expected 1"));
        }
        if self.subgroup_proportions.values().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("subgroup proportions must lie in [0, 1]".into());
        }
        if self.subgroup_proportions.values().filter(|p| **p > 0.0).count() < 2 {
            return bad("at least two subgroups need a positive proportion".into());
        }
        let fracs = std::iter::once(&self.fake_fraction).chain(self.fake_fraction_by_subgroup.values());
        for f in fracs {
            if !(0.0..1.0).contains(f) {
                return bad(format!("fake fraction {f} outside [0, 1)"));
            }
        }
        if self.fingerprint_strength < 0.0 {
            return Err(SynthError::NegativeStrength(self.fingerprint_strength));
        }
        if !(0.0..=1.0).contains(&self.fingerprint_jitter) {
            return bad("fingerprint_jitter outside [0, 1]".into());
        }
        if self.methods.is_empty() {
            return bad("no forgery methods".into());
        }
        Ok(())
    }

    pub fn fake_fraction_for(&self, key: DemographicKey) -> f64 {
        self.fake_fraction_by_subgroup.get(&key).copied().unwrap_or(self.fake_fraction)
    }
}

/// Fingerprint period (pixels) along x and y for the i-th method.
fn fingerprint_periods(method_index: usize) -> (f64, f64) {
    const TABLE: [(f64, f64); 6] = [(4.0, 4.0), (3.0, 5.0), (5.0, 3.0), (4.0, 3.0), (3.0, 4.0), (3.0, 3.0)];
    TABLE[method_index % TABLE.len()]
}

/// Adds `strength * sin(2 pi x / px + a) * sin(2 pi y / py + b)` to every
/// channel inside the central crop, then clips to `[0, 1]`.
pub fn plant_fingerprint(image: &Image, strength: f64, seed: u64) -> Result<Image, SynthError> {
    plant_fingerprint_with_periods(image, strength, seed, fingerprint_periods(0))
}

pub fn plant_fingerprint_with_periods(
    image: &Image,
    strength: f64,
    seed: u64,
    (px, py): (f64, f64),
) -> Result<Image, SynthError> {
    if strength < 0.0 {
        return Err(SynthError::NegativeStrength(strength));
    }
    if strength == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = derive_rng(seed, &[purpose::SYNTH_FINGERPRINT]);
    let tau = std::f64::consts::TAU;
    let (a, b): (f64, f64) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
    let (h, w) = (image.height, image.width);
    let (y0, y1, x0, x1) = (h / 4, h - h / 4, w / 4, w - w / 4);
    let mut out = image.clone();
    for y in y0..y1 {
        let sy = (tau * y as f64 / py + b).sin();
        for x in x0..x1 {
            let d = strength * (tau * x as f64 / px + a).sin() * sy;
            for c in 0..image.channels {
                let v = out.at_mut(c, y, x);
                *v = (*v + d).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

fn skin_palette(key: DemographicKey) -> [f64; 3] {
    let base = match key.race {
        Race::A => [0.86, 0.71, 0.52],
        Race::B => [0.42, 0.28, 0.20],
        Race::W => [0.93, 0.77, 0.68],
        Race::O => [0.70, 0.50, 0.36],
    };
    let tint = match key.gender {
        Gender::M => [0.0, -0.02, -0.02],
        Gender::F => [0.04, 0.0, 0.02],
    };
    [base[0] + tint[0], base[1] + tint[1], base[2] + tint[2]]
}

/// Value-noise cell size in pixels; finer cells put texture energy close to
/// the fingerprint band.
fn texture_cell(key: DemographicKey) -> usize {
    match key.race {
        Race::A => 6,
        Race::B => 2,
        Race::W => 8,
        Race::O => 3,
    }
}

const NEUTRAL_SKIN: [f64; 3] = [0.75, 0.6, 0.5];
const TEXTURE_AMPLITUDE: f64 = 0.08;
const SENSOR_NOISE: f64 = 0.01;

fn value_noise(size: usize, cell: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let l = |yy: usize, xx: usize| lattice[yy * n + xx];
            let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
            let bot = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Renders a real face-proxy: background, skin-coloured textured ellipse,
/// dark eye and mouth marks, mild sensor noise.
pub fn render_face(key: DemographicKey, size: usize, attribute_strength: f64, rng: &mut impl Rng) -> Image {
    let s = size as f64;
    let palette = skin_palette(key);
    let bright = rng.random_range(-0.06..0.06);
    let skin: Vec<f64> = (0..3)
        .map(|c| NEUTRAL_SKIN[c] + attribute_strength * (palette[c] - NEUTRAL_SKIN[c]) + bright)
        .collect();
    let bg_level = rng.random_range(0.15..0.85);
    let bg: Vec<f64> = (0..3).map(|_| bg_level + rng.random_range(-0.05..0.05)).collect();
    let (cy, cx) = (s / 2.0 + rng.random_range(-2.0..2.0), s / 2.0 + rng.random_range(-2.0..2.0));
    let (ry, rx) = (s * rng.random_range(0.40..0.45), s * rng.random_range(0.32..0.37));
    let cell = if attribute_strength > 0.0 { texture_cell(key) } else { 4 };
    let tex = value_noise(size, cell, rng);
    let amp = TEXTURE_AMPLITUDE * attribute_strength.max(0.25);
    let eye_dy = ry * 0.25;
    let eye_dx = rx * 0.42;
    let noise = Normal::new(0.0, SENSOR_NOISE).expect("std");
    let mut img = Tensor3::zeros(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let e = ((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2);
            let mut px = [0.0; 3];
            if e <= 1.0 {
                let t = tex[y * size + x] * amp;
                for c in 0..3 {
                    px[c] = skin[c] + t;
                }
                let eye = |ex: f64| ((fy - (cy - eye_dy)) / (ry * 0.07)).powi(2) + ((fx - ex) / (rx * 0.16)).powi(2) <= 1.0;
                let mouth = ((fy - (cy + ry * 0.45)) / (ry * 0.05)).powi(2) + ((fx - cx) / (rx * 0.35)).powi(2) <= 1.0;
                if eye(cx - eye_dx) || eye(cx + eye_dx) || mouth {
                    px = [0.12, 0.08, 0.08];
                }
            } else {
                px.copy_from_slice(&bg);
            }
            for c in 0..3 {
                *img.at_mut(c, y, x) = (px[c] + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn split_tag(s: Split) -> u64 {
    match s {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Draws the annotations of one sample (pure function of config, split, index).
pub fn draw_annotation(cfg: &SynthConfig, split: Split, index: usize) -> (DemographicKey, Label, Option<Method>) {
    let mut rng = derive_rng(cfg.seed, &[purpose::SYNTH_ASSIGN, split_tag(split), index as u64]);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let positive: Vec<(&DemographicKey, &f64)> = cfg.subgroup_proportions.iter().filter(|(_, p)| **p > 0.0).collect();
    let mut key = *positive.last().expect("validated").0;
    for (k, p) in &positive {
        acc += **p;
        if u < acc {
            key = **k;
            break;
        }
    }
    let fake = rng.random::<f64>() < cfg.fake_fraction_for(key);
    if fake {
        let m = cfg.methods[rng.random_range(0..cfg.methods.len())];
        (key, Label::Fake, Some(m))
    } else {
        (key, Label::Real, None)
    }
}

/// Renders sample `index` of `split`: a face-proxy, fingerprinted if fake.
pub fn render_sample(cfg: &SynthConfig, split: Split, index: usize) -> (Image, DemographicKey, Label, Option<Method>) {
    let (key, label, method) = draw_annotation(cfg, split, index);
    let path = [purpose::SYNTH_IMAGE, split_tag(split), index as u64];
    let mut rng = derive_rng(cfg.seed, &path);
    let mut img = render_face(key, cfg.image_size, cfg.attribute_signal_strength, &mut rng);
    if let Some(m) = method {
        let mi = cfg.methods.iter().position(|x| *x == m).expect("method from list");
        let strength = cfg.fingerprint_strength * (1.0 - cfg.fingerprint_jitter * rng.random::<f64>());
        let fp_seed = rng.random::<u64>();
        img = plant_fingerprint_with_periods(&img, strength, fp_seed, fingerprint_periods(mi))
            .expect("validated strength");
    }
    (img, key, label, method)
}

/// Renders every sample of `split` in memory, quantised to 8 bits exactly
/// as the written PNG files would be.
pub fn generate_samples(cfg: &SynthConfig, split: Split) -> Result<Vec<Sample>, SynthError> {
    cfg.validate()?;
    let n = cfg.n_per_split.get(&split).copied().unwrap_or(0);
    Ok((0..n)
        .map(|i| {
            let (img, key, label, method) = render_sample(cfg, split, i);
            Sample {
                id: format!("{}-{i:06}", split.as_str()),
                image: Arc::new(image_from_rgb8(&image_to_rgb8(&img))),
                label,
                subgroup: key,
                method,
                split,
            }
        })
        .collect())
}

/// Writes `<split>/<index>.png` files and `manifest.csv` under `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    let unwritable = |path: &Path, e: &dyn std::fmt::Display| SynthError::UnwritableDir {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    fs::create_dir_all(out_dir).map_err(|e| unwritable(out_dir, &e))?;
    let mut entries = Vec::new();
    for (&split, &n) in &cfg.n_per_split {
        let dir = out_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| unwritable(&dir, &e))?;
        for i in 0..n {
            let (img, key, label, method) = render_sample(cfg, split, i);
            let rel = PathBuf::from(split.as_str()).join(format!("{i:06}.png"));
            save_image(&img, &out_dir.join(&rel)).map_err(|e| match e {
                DataError::Io { path, source } => unwritable(&path, &source),
                other => SynthError::Data(other),
            })?;
            entries.push(ManifestEntry {
                id: format!("{}-{i:06}", split.as_str()),
                path: rel,
                label,
                subgroup: key,
                method,
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    let mpath = out_dir.join("manifest.csv");
    write_manifest(&manifest, &mpath).map_err(|e| match e {
        DataError::Io { path, source } => unwritable(&path, &source),
        other => SynthError::Data(other),
    })?;
    Ok(manifest)
}
