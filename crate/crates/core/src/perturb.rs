//! The eight evaluation-time disturbances at five intensity levels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::imageops;
use crate::rng::{derive_rng, purpose};

/// Bumped whenever a schedule table below changes.
pub const SCHEDULE_VERSION: u32 = 1;
pub const MAX_INTENSITY: u8 = 5;

pub const GN_SIGMA: [f64; 5] = [0.01, 0.02, 0.05, 0.1, 0.2];
pub const GB_SIGMA: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 3.0];
pub const BWN_BLOCK: usize = 8;
pub const BWN_COUNT: [usize; 5] = [2, 4, 6, 8, 10];
pub const PX_BLOCK: [usize; 5] = [2, 4, 6, 8, 12];
pub const CC_FACTOR: [f64; 5] = [0.85, 0.725, 0.6, 0.475, 0.35];
pub const CS_FACTOR: [f64; 5] = [0.4, 0.3, 0.2, 0.1, 0.0];
pub const IC_QUALITY: [u8; 5] = [80, 60, 40, 20, 10];
pub const AT_ROTATION_DEG: [f64; 5] = [2.0, 4.0, 6.0, 8.0, 10.0];
pub const AT_SHIFT_PX: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PerturbError {
    #[error("intensity {0} outside 0..=5")]
    BadIntensity(u8),
    #[error("cannot parse disturbance {0:?} (expected KIND:LEVEL, e.g. GB:3)")]
    BadSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DisturbanceKind {
    GN,
    GB,
    BWN,
    PX,
    CC,
    CS,
    IC,
    AT,
}

impl DisturbanceKind {
    pub const ALL: [DisturbanceKind; 8] = [Self::GN, Self::GB, Self::BWN, Self::PX, Self::CC, Self::CS, Self::IC, Self::AT];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GN => "GN",
            Self::GB => "GB",
            Self::BWN => "BWN",
            Self::PX => "PX",
            Self::CC => "CC",
            Self::CS => "CS",
            Self::IC => "IC",
            Self::AT => "AT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Disturbance {
    pub kind: DisturbanceKind,
    pub intensity: u8,
}

impl Disturbance {
    pub fn new(kind: DisturbanceKind, intensity: u8) -> Result<Self, PerturbError> {
        if intensity > MAX_INTENSITY {
            return Err(PerturbError::BadIntensity(intensity));
        }
        Ok(Self { kind, intensity })
    }
}

impl fmt::Display for Disturbance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.intensity)
    }
}

impl FromStr for Disturbance {
    type Err = PerturbError;
    fn from_str(s: &str) -> Result<Self, PerturbError> {
        let bad = || PerturbError::BadSpec(s.to_string());
        let (k, l) = s.split_once(':').ok_or_else(bad)?;
        let kind = DisturbanceKind::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(k.trim()))
            .ok_or_else(bad)?;
        let level: u8 = l.trim().parse().map_err(|_| bad())?;
        Disturbance::new(kind, level)
    }
}

fn block_noise(img: &Image, count: usize, rng: &mut impl Rng) -> Image {
    let mut out = img.clone();
    let b = BWN_BLOCK.min(img.height).min(img.width);
    for _ in 0..count {
        let y0 = rng.random_range(0..=img.height - b);
        let x0 = rng.random_range(0..=img.width - b);
        for c in 0..img.channels {
            for y in y0..y0 + b {
                for x in x0..x0 + b {
                    *out.at_mut(c, y, x) = rng.random::<f64>();
                }
            }
        }
    }
    out
}

/// Applies `d` to `image`; intensity 0 returns the input unchanged.
pub fn apply_disturbance(image: &Image, d: Disturbance, seed: u64) -> Result<Image, PerturbError> {
    if d.intensity > MAX_INTENSITY {
        return Err(PerturbError::BadIntensity(d.intensity));
    }
    if d.intensity == 0 {
        return Ok(image.clone());
    }
    let i = d.intensity as usize - 1;
    let mut rng = derive_rng(seed, &[purpose::DISTURB, d.kind as u64, d.intensity as u64]);
    Ok(match d.kind {
        DisturbanceKind::GN => {
            let n = Normal::new(0.0, GN_SIGMA[i]).expect("sigma");
            let mut out = image.clone();
            out.data.iter_mut().for_each(|v| *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0));
            out
        }
        DisturbanceKind::GB => imageops::gaussian_blur(image, GB_SIGMA[i]),
        DisturbanceKind::BWN => block_noise(image, BWN_COUNT[i], &mut rng),
        DisturbanceKind::PX => imageops::pixelate(image, PX_BLOCK[i]),
        DisturbanceKind::CC => imageops::adjust_contrast(image, CC_FACTOR[i]),
        DisturbanceKind::CS => imageops::adjust_saturation(image, CS_FACTOR[i]),
        DisturbanceKind::IC => imageops::jpeg_roundtrip(image, IC_QUALITY[i]),
        DisturbanceKind::AT => {
            let sign = |r: &mut crate::rng::Rng| if r.random::<bool>() { 1.0 } else { -1.0 };
            let angle = sign(&mut rng) * AT_ROTATION_DEG[i];
            let tx = sign(&mut rng) * AT_SHIFT_PX[i];
            let ty = sign(&mut rng) * AT_SHIFT_PX[i];
            imageops::affine(image, angle, tx, ty)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_vec(3, 32, 32, (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn intensity_zero_is_identity() {
        let img = random_image(1);
        for k in DisturbanceKind::ALL {
            let out = apply_disturbance(&img, Disturbance::new(k, 0).unwrap(), 9).unwrap();
            assert_eq!(out, img, "{k:?}");
        }
    }

    #[test]
    fn outputs_in_range_and_deterministic() {
        let img = random_image(2);
        for k in DisturbanceKind::ALL {
            for l in 1..=5 {
                let d = Disturbance::new(k, l).unwrap();
                let a = apply_disturbance(&img, d, 4).unwrap();
                assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)), "{d}");
                assert_eq!(a, apply_disturbance(&img, d, 4).unwrap());
                assert_eq!(a.shape(), img.shape());
            }
        }
    }

    #[test]
    fn gaussian_noise_statistics() {
        let img = Tensor3::filled(3, 64, 64, 0.5);
        let out = apply_disturbance(&img, "GN:3".parse().unwrap(), 1).unwrap();
        let d: Vec<f64> = out.data.iter().zip(&img.data).map(|(a, b)| a - b).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        assert!((sd - 0.05).abs() < 0.005, "sd {sd}");
    }

    #[test]
    fn pixelation_blocks() {
        let out = apply_disturbance(&random_image(3), "PX:2".parse().unwrap(), 0).unwrap();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(out.at(c, y, x), out.at(c, y / 4 * 4, x / 4 * 4));
                }
            }
        }
    }

    #[test]
    fn spec_strings() {
        let d: Disturbance = "GB:3".parse().unwrap();
        assert_eq!(d, Disturbance::new(DisturbanceKind::GB, 3).unwrap());
        assert_eq!(d.to_string(), "GB:3");
        assert_eq!("GB:6".parse::<Disturbance>(), Err(PerturbError::BadIntensity(6)));
        assert!("XX:1".parse::<Disturbance>().is_err());
        assert!("GB".parse::<Disturbance>().is_err());
    }
}
