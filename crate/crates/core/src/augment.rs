//! Training-time augmentations, each applied independently with probability `p`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::imageops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub p: f64,
    pub max_rotation_deg: f64,
    pub max_blur_sigma: f64,
    /// Brightness and contrast factors are drawn from `1 +- jitter`.
    pub jitter: f64,
    pub min_jpeg_quality: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.5,
            max_rotation_deg: 10.0,
            max_blur_sigma: 1.0,
            jitter: 0.1,
            min_jpeg_quality: 60,
        }
    }
}

/// Horizontal flip, rotation, blur, brightness/contrast jitter and JPEG
/// re-compression, in that order.
pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Image {
    if !cfg.enabled {
        return img.clone();
    }
    let mut out = img.clone();
    let hit = |rng: &mut dyn rand::RngCore| rng.random::<f64>() < cfg.p;
    if hit(rng) {
        out = imageops::flip_horizontal(&out);
    }
    if hit(rng) && cfg.max_rotation_deg > 0.0 {
        let a = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        out = imageops::affine(&out, a, 0.0, 0.0);
    }
    if hit(rng) && cfg.max_blur_sigma > 0.0 {
        let s = rng.random_range(0.0..=cfg.max_blur_sigma);
        out = imageops::gaussian_blur(&out, s);
    }
    if hit(rng) && cfg.jitter > 0.0 {
        let b = 1.0 + rng.random_range(-cfg.jitter..=cfg.jitter);
        let c = 1.0 + rng.random_range(-cfg.jitter..=cfg.jitter);
        out = imageops::adjust_contrast(&imageops::adjust_brightness(&out, b), c);
    }
    if hit(rng) && cfg.min_jpeg_quality < 100 {
        let q = rng.random_range(cfg.min_jpeg_quality..=100);
        out = imageops::jpeg_roundtrip(&out, q);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn disabled_or_zero_probability_is_identity() {
        let img = Tensor3::filled(3, 16, 16, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let off = AugmentConfig { enabled: false, ..Default::default() };
        assert_eq!(augment(&img, &off, &mut rng), img);
        let never = AugmentConfig { p: 0.0, ..Default::default() };
        assert_eq!(augment(&img, &never, &mut rng), img);
    }

    #[test]
    fn output_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor3::from_vec(3, 16, 16, (0..768).map(|i| (i % 7) as f64 / 6.0).collect());
        let always = AugmentConfig { p: 1.0, ..Default::default() };
        for _ in 0..20 {
            let out = augment(&img, &always, &mut rng);
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
