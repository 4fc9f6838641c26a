//! Blockwise 8x8 DCT high-pass preprocessing.

use crate::tensor::Tensor3;

pub const BLOCK: usize = 8;
/// Coefficients with `u + v <= LOW_BAND` are removed.
pub const LOW_BAND: usize = 2;

/// Orthonormal DCT-II matrix, row `u` holds basis function `u`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for u in 0..n {
        let a = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for x in 0..n {
            m[u * n + x] =
                a * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// Forward 2-D DCT of a `bh x bw` block (row-major).
pub fn dct2(block: &[f64], bh: usize, bw: usize) -> Vec<f64> {
    let (mh, mw) = (dct_matrix(bh), dct_matrix(bw));
    let mut tmp = vec![0.0; bh * bw];
    for u in 0..bh {
        for x in 0..bw {
            tmp[u * bw + x] = (0..bh).map(|y| mh[u * bh + y] * block[y * bw + x]).sum();
        }
    }
    let mut out = vec![0.0; bh * bw];
    for u in 0..bh {
        for v in 0..bw {
            out[u * bw + v] = (0..bw).map(|x| mw[v * bw + x] * tmp[u * bw + x]).sum();
        }
    }
    out
}

pub fn idct2(coef: &[f64], bh: usize, bw: usize) -> Vec<f64> {
    let (mh, mw) = (dct_matrix(bh), dct_matrix(bw));
    let mut tmp = vec![0.0; bh * bw];
    for u in 0..bh {
        for x in 0..bw {
            tmp[u * bw + x] = (0..bw).map(|v| mw[v * bw + x] * coef[u * bw + v]).sum();
        }
    }
    let mut out = vec![0.0; bh * bw];
    for y in 0..bh {
        for x in 0..bw {
            out[y * bw + x] = (0..bh).map(|u| mh[u * bh + y] * tmp[u * bw + x]).sum();
        }
    }
    out
}

/// Per channel, per 8x8 block: DCT, zero the low-frequency triangle, inverse
/// DCT. Ragged edge blocks use a DCT of their own size. Returns `None` when
/// either side is shorter than one block.
pub fn dct_highpass(img: &Tensor3) -> Option<Tensor3> {
    let (c, h, w) = img.shape();
    if h < BLOCK || w < BLOCK {
        return None;
    }
    let mut out = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        for by in (0..h).step_by(BLOCK) {
            for bx in (0..w).step_by(BLOCK) {
                let (bh, bw) = ((h - by).min(BLOCK), (w - bx).min(BLOCK));
                let mut block = Vec::with_capacity(bh * bw);
                for y in 0..bh {
                    for x in 0..bw {
                        block.push(img.at(ch, by + y, bx + x));
                    }
                }
                let mut coef = dct2(&block, bh, bw);
                for u in 0..bh {
                    for v in 0..bw {
                        if u + v <= LOW_BAND {
                            coef[u * bw + v] = 0.0;
                        }
                    }
                }
                let rec = idct2(&coef, bh, bw);
                for y in 0..bh {
                    for x in 0..bw {
                        *out.at_mut(ch, by + y, bx + x) = rec[y * bw + x];
                    }
                }
            }
        }
    }
    Some(out)
}
