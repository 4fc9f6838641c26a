//! Adaptive SRM residual filter bank and the image preprocessing modes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dct::dct_highpass;
use crate::tensor::{gemm, im2col, ConvGeometry, MatRef, Padding, Tensor3};

pub const KERNEL: usize = 5;
pub const IN_CHANNELS: usize = 3;
const TAPS: usize = IN_CHANNELS * KERNEL * KERNEL;
/// Default residual truncation, in `[0, 1]` pixel units.
pub const DEFAULT_CLAMP: f64 = 2.0 / 255.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SrmError {
    #[error("output channel count {0} is not a positive multiple of 3")]
    BadChannelCount(usize),
    #[error("image {height}x{width} is smaller than the {min}x{min} minimum")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("kernel gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("gradient has {found} entries, bank has {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("kernel file: {0}")]
    Io(String),
}

/// The three residual kernel types, each 5x5 and zero-sum.
pub fn canonical_kernels() -> [[f64; 25]; 3] {
    let mut kb = [0.0; 25];
    let kb3 = [-1.0, 2.0, -1.0, 2.0, -4.0, 2.0, -1.0, 2.0, -1.0];
    for y in 0..3 {
        for x in 0..3 {
            kb[(y + 1) * 5 + x + 1] = kb3[y * 3 + x] / 4.0;
        }
    }
    #[rustfmt::skip]
    let kv_raw = [
        -1.0,  2.0,  -2.0,  2.0, -1.0,
         2.0, -6.0,   8.0, -6.0,  2.0,
        -2.0,  8.0, -12.0,  8.0, -2.0,
         2.0, -6.0,   8.0, -6.0,  2.0,
        -1.0,  2.0,  -2.0,  2.0, -1.0,
    ];
    let kv = kv_raw.map(|v| v / 12.0);
    let mut h2 = [0.0; 25];
    h2[2 * 5 + 1] = 0.5;
    h2[2 * 5 + 2] = -1.0;
    h2[2 * 5 + 3] = 0.5;
    [kb, kv, h2]
}

/// Learnable `[c_out, 3, 5, 5]` residual kernels plus a frozen initial copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub c_out: usize,
    /// Row-major `[c_out, 3 * 5 * 5]`.
    pub kernels: Vec<f64>,
    init_snapshot: Vec<f64>,
    pub lambda: f64,
    /// Residuals are truncated to `[-t, t]`; `None` disables truncation.
    pub clamp: Option<f64>,
}

pub fn init_kernel_bank(c_out: usize) -> Result<KernelBank, SrmError> {
    if c_out == 0 || c_out % 3 != 0 {
        return Err(SrmError::BadChannelCount(c_out));
    }
    let types = canonical_kernels();
    let per_type = c_out / 3;
    let mut kernels = Vec::with_capacity(c_out * TAPS);
    for o in 0..c_out {
        let k = &types[o / per_type];
        for _ in 0..IN_CHANNELS {
            kernels.extend_from_slice(k);
        }
    }
    Ok(KernelBank {
        c_out,
        init_snapshot: kernels.clone(),
        kernels,
        lambda: 1e-4,
        clamp: Some(DEFAULT_CLAMP),
    })
}

/// Cached state needed to back-propagate into the kernels.
#[derive(Debug, Clone)]
pub struct ResidualCache {
    cols: Vec<f64>,
    /// Pre-clamp response, used to mask gradients of truncated entries.
    raw: Vec<f64>,
}

fn geometry() -> ConvGeometry {
    ConvGeometry {
        kernel: KERNEL,
        stride: 1,
        pad: KERNEL / 2,
        padding: Padding::Reflect,
    }
}

impl KernelBank {
    pub fn init_snapshot(&self) -> &[f64] {
        &self.init_snapshot
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c_out, IN_CHANNELS, KERNEL, KERNEL]
    }

    /// Rebuilds a bank from stored parts (checkpoint load).
    pub fn from_parts(kernels: Vec<f64>, init_snapshot: Vec<f64>, lambda: f64, clamp: Option<f64>) -> Result<Self, SrmError> {
        if kernels.len() != init_snapshot.len() || kernels.len() % TAPS != 0 {
            return Err(SrmError::ShapeMismatch {
                expected: init_snapshot.len(),
                found: kernels.len(),
            });
        }
        Ok(Self {
            c_out: kernels.len() / TAPS,
            kernels,
            init_snapshot,
            lambda,
            clamp,
        })
    }

    pub fn kernel(&self, o: usize) -> &[f64] {
        &self.kernels[o * TAPS..(o + 1) * TAPS]
    }

    /// Stride-1 cross-correlation with reflect padding, then truncation.
    /// Taps act on differences to the centre pixel, so flat regions give an
    /// exactly zero response for any kernel.
    pub fn forward(&self, image: &Tensor3) -> Result<(Tensor3, ResidualCache), SrmError> {
        let (c, h, w) = image.shape();
        assert_eq!(c, IN_CHANNELS, "residual filter expects RGB input");
        if h < KERNEL || w < KERNEL {
            return Err(SrmError::ImageTooSmall {
                height: h,
                width: w,
                min: KERNEL,
            });
        }
        let (mut cols, ho, wo) = im2col(image, geometry());
        center_taps(&mut cols, ho * wo);
        let mut raw = vec![0.0; self.c_out * ho * wo];
        gemm(
            1.0,
            MatRef::new(&self.kernels, self.c_out, TAPS),
            MatRef::new(&cols, TAPS, ho * wo),
            0.0,
            &mut raw,
        );
        let out = match self.clamp {
            Some(t) => raw.iter().map(|v| v.clamp(-t, t)).collect(),
            None => raw.clone(),
        };
        Ok((Tensor3::from_vec(self.c_out, ho, wo, out), ResidualCache { cols, raw }))
    }

    /// Gradient of a loss w.r.t. the kernels given its gradient w.r.t. the
    /// (clamped) residual map. Truncated entries pass no gradient.
    pub fn kernel_grad(&self, cache: &ResidualCache, d_residual: &Tensor3) -> Vec<f64> {
        let n = cache.cols.len() / TAPS;
        let mut dr = d_residual.data.clone();
        if let Some(t) = self.clamp {
            for (d, r) in dr.iter_mut().zip(&cache.raw) {
                if r.abs() > t {
                    *d = 0.0;
                }
            }
        }
        let mut grad = vec![0.0; self.kernels.len()];
        gemm(
            1.0,
            MatRef::new(&dr, self.c_out, n),
            MatRef::new(&cache.cols, TAPS, n).t(),
            0.0,
            &mut grad,
        );
        grad
    }

    /// `kernels <- kernels - lambda * grad`; the snapshot is left alone.
    pub fn update_kernels(&mut self, grad: &[f64], lambda: f64) -> Result<(), SrmError> {
        if grad.len() != self.kernels.len() {
            return Err(SrmError::ShapeMismatch {
                expected: self.kernels.len(),
                found: grad.len(),
            });
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(SrmError::NonFiniteGradient);
        }
        for (k, g) in self.kernels.iter_mut().zip(grad) {
            *k -= lambda * g;
        }
        Ok(())
    }

    pub fn restore_from_snapshot(&mut self) {
        self.kernels.clone_from(&self.init_snapshot);
    }

    /// Writes raw little-endian kernels to `path` and a JSON sidecar next to it.
    pub fn export(&self, path: &Path) -> Result<(), SrmError> {
        let bytes: Vec<u8> = self.kernels.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| SrmError::Io(e.to_string()))?;
        let meta = serde_json::json!({ "shape": self.shape(), "lambda": self.lambda, "dtype": "f64-le" });
        let side = path.with_extension("json");
        fs::write(side, serde_json::to_string_pretty(&meta).expect("json"))
            .map_err(|e| SrmError::Io(e.to_string()))
    }
}

/// Replaces every patch row by its difference to the centre-pixel row.
fn center_taps(cols: &mut [f64], n: usize) {
    let per_channel = KERNEL * KERNEL;
    for ch in 0..IN_CHANNELS {
        let block = &mut cols[ch * per_channel * n..(ch + 1) * per_channel * n];
        let mid = per_channel / 2;
        let center = block[mid * n..(mid + 1) * n].to_vec();
        for row in block.chunks_mut(n) {
            row.iter_mut().zip(&center).for_each(|(v, c)| *v -= c);
        }
    }
}

pub fn apply_residual_filter(bank: &KernelBank, image: &Tensor3) -> Result<Tensor3, SrmError> {
    bank.forward(image).map(|(r, _)| r)
}

pub fn update_kernels(bank: &KernelBank, grad: &[f64], lambda: f64) -> Result<KernelBank, SrmError> {
    let mut out = bank.clone();
    out.update_kernels(grad, lambda)?;
    Ok(out)
}

/// Input transform in front of the forgery discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// Residual bank updated by the misleading loss.
    AstraySrm,
    /// Residual bank kept at its initial values.
    SrmFixed,
    Dct,
    None,
}

impl Preprocess {
    pub fn uses_bank(self) -> bool {
        matches!(self, Preprocess::AstraySrm | Preprocess::SrmFixed)
    }

    pub fn output_channels(self, c_out: usize) -> usize {
        if self.uses_bank() {
            c_out
        } else {
            IN_CHANNELS
        }
    }
}

impl std::str::FromStr for Preprocess {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "astray_srm" => Ok(Self::AstraySrm),
            "srm_fixed" => Ok(Self::SrmFixed),
            "dct" => Ok(Self::Dct),
            "none" => Ok(Self::None),
            other => Err(format!("unknown preprocess {other:?}")),
        }
    }
}

/// Applies a non-trainable preprocessing mode (DCT or none).
pub fn apply_dct_preprocess(image: &Tensor3) -> Result<Tensor3, SrmError> {
    dct_highpass(image).ok_or(SrmError::ImageTooSmall {
        height: image.height,
        width: image.width,
        min: crate::dct::BLOCK,
    })
}
