//! Pixel-space image operations shared by augmentation and disturbances.
//! Every function returns a new image clamped to `[0, 1]`.

use std::io::Cursor;

use crate::data::{image_from_rgb8, image_to_rgb8, Image};
use crate::tensor::{reflect_index, Tensor3};

fn clamp01(img: &mut Image) {
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                *out.at_mut(c, y, x) = img.at(c, y, img.width - 1 - x);
            }
        }
    }
    out
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflect borders; `sigma <= 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut tmp = Tensor3::zeros(img.channels, h, w);
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = tmp.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[y * w + reflect_index(x as isize + i as isize - r, w)])
                    .sum();
            }
        }
    }
    let mut out = Tensor3::zeros(img.channels, h, w);
    for c in 0..img.channels {
        let src = tmp.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[reflect_index(y as isize + i as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    clamp01(&mut out);
    out
}

/// Rotation about the image centre followed by a translation, sampled
/// bilinearly with reflected borders.
pub fn affine(img: &Image, angle_deg: f64, tx: f64, ty: f64) -> Image {
    if angle_deg == 0.0 && tx == 0.0 && ty == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, co) = angle_deg.to_radians().sin_cos();
    let mut out = Tensor3::zeros(img.channels, h, w);
    for y in 0..h {
        for x in 0..w {
            // inverse map: output pixel -> source coordinate
            let dx = x as f64 - tx - cx;
            let dy = y as f64 - ty - cy;
            let sx = co * dx + s * dy + cx;
            let sy = -s * dx + co * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let xi = [reflect_index(x0 as isize, w), reflect_index(x0 as isize + 1, w)];
            let yi = [reflect_index(y0 as isize, h), reflect_index(y0 as isize + 1, h)];
            for c in 0..img.channels {
                let p = img.plane(c);
                let top = p[yi[0] * w + xi[0]] * (1.0 - fx) + p[yi[0] * w + xi[1]] * fx;
                let bot = p[yi[1] * w + xi[0]] * (1.0 - fx) + p[yi[1] * w + xi[1]] * fx;
                *out.at_mut(c, y, x) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    clamp01(&mut out);
    out
}

/// Encodes to JPEG at `quality` (1..=100) and decodes back.
pub fn jpeg_roundtrip(img: &Image, quality: u8) -> Image {
    let rgb = image_to_rgb8(img);
    let mut buf = Vec::new();
    let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100));
    rgb.write_with_encoder(enc).expect("in-memory jpeg encode");
    let decoded = image::load(Cursor::new(buf), image::ImageFormat::Jpeg)
        .expect("in-memory jpeg decode")
        .to_rgb8();
    image_from_rgb8(&decoded)
}

/// Replaces each `block x block` tile (anchored at the origin) by its mean.
pub fn pixelate(img: &Image, block: usize) -> Image {
    if block <= 1 {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    for c in 0..img.channels {
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
                let mut sum = 0.0;
                for y in by..ey {
                    for x in bx..ex {
                        sum += img.at(c, y, x);
                    }
                }
                let mean = sum / ((ey - by) * (ex - bx)) as f64;
                for y in by..ey {
                    for x in bx..ex {
                        *out.at_mut(c, y, x) = mean;
                    }
                }
            }
        }
    }
    out
}

pub fn luma(img: &Image, y: usize, x: usize) -> f64 {
    0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x)
}

/// Scales distances from the mean luma by `factor`.
pub fn adjust_contrast(img: &Image, factor: f64) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let n = (img.height * img.width) as f64;
    let mut mean = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            mean += luma(img, y, x);
        }
    }
    mean /= n;
    let mut out = img.map(|v| mean + factor * (v - mean));
    clamp01(&mut out);
    out
}

/// Scales each pixel's distance from its own grey level by `factor`.
pub fn adjust_saturation(img: &Image, factor: f64) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luma(img, y, x);
            for c in 0..img.channels {
                *out.at_mut(c, y, x) = l + factor * (img.at(c, y, x) - l);
            }
        }
    }
    clamp01(&mut out);
    out
}

pub fn adjust_brightness(img: &Image, factor: f64) -> Image {
    let mut out = img.scale(factor);
    clamp01(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn blur_preserves_constants_and_smooths() {
        let flat = Tensor3::filled(3, 16, 16, 0.3);
        assert!(gaussian_blur(&flat, 1.5).max_abs_diff(&flat) < 1e-12);
        let img = random_image(1, 16, 16);
        let var = |t: &Image| {
            let m = t.data.iter().sum::<f64>() / t.data.len() as f64;
            t.data.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        };
        assert!(var(&gaussian_blur(&img, 1.0)) < var(&img));
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = random_image(2, 5, 7);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn integer_translation_shifts_pixels() {
        let img = random_image(3, 8, 8);
        let out = affine(&img, 0.0, 2.0, 1.0);
        for c in 0..3 {
            for y in 1..8 {
                for x in 2..8 {
                    assert!((out.at(c, y, x) - img.at(c, y - 1, x - 2)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pixelate_is_blockwise_constant() {
        let img = random_image(4, 12, 12);
        let out = pixelate(&img, 4);
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..12 {
                    assert_eq!(out.at(c, y, x), out.at(c, y / 4 * 4, x / 4 * 4));
                }
            }
        }
    }

    #[test]
    fn zero_saturation_is_grey() {
        let out = adjust_saturation(&random_image(5, 4, 4), 0.0);
        for y in 0..4 {
            for x in 0..4 {
                assert!((out.at(0, y, x) - out.at(1, y, x)).abs() < 1e-12);
                assert!((out.at(1, y, x) - out.at(2, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jpeg_keeps_shape_and_range() {
        let img = random_image(6, 16, 16);
        let out = jpeg_roundtrip(&img, 50);
        assert_eq!(out.shape(), img.shape());
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.max_abs_diff(&img) > 0.0);
    }
}
