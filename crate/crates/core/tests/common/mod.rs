//! Shared helpers for the integration tests: central finite differences
//! and naive loop implementations of the compute kernels, kept independent
//! of the library's own code paths so they can act as references.

#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Asserts elementwise closeness under `|a-b| <= atol + rtol*max(|a|,|b|)`.
pub fn assert_close(got: &[f64], want: &[f64], rtol: f64, atol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for i in 0..got.len() {
        let (a, b) = (got[i], want[i]);
        let tol = atol + rtol * a.abs().max(b.abs());
        assert!(
            (a - b).abs() <= tol,
            "{what}: element {i}: got {a}, want {b} (|diff| {} > tol {tol})",
            (a - b).abs()
        );
    }
}

/// Direct six-loop convolution with the same geometry rules as the library:
/// output extent is ceil(in/stride), padding splits the deficit with the
/// extra pixel at the bottom/right.
pub struct NaiveConv {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl NaiveConv {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + self.stride - 1) / self.stride,
            (self.w + self.stride - 1) / self.stride,
        )
    }

    fn pads(&self) -> (usize, usize) {
        let (ho, wo) = self.out_hw();
        let eff = (self.k - 1) * self.dilation + 1;
        let py = ((ho - 1) * self.stride + eff).saturating_sub(self.h) / 2;
        let px = ((wo - 1) * self.stride + eff).saturating_sub(self.w) / 2;
        (py, px)
    }

    pub fn forward(&self, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
        let (ho, wo) = self.out_hw();
        let (py, px) = self.pads();
        let mut out = vec![0.0; self.n * self.c_out * ho * wo];
        for ni in 0..self.n {
            for co in 0..self.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b[co]);
                        for ci in 0..self.c_in {
                            for ky in 0..self.k {
                                for kx in 0..self.k {
                                    let iy = (oy * self.stride + ky * self.dilation) as isize - py as isize;
                                    let ix = (ox * self.stride + kx * self.dilation) as isize - px as isize;
                                    if iy < 0 || iy >= self.h as isize || ix < 0 || ix >= self.w as isize {
                                        continue;
                                    }
                                    let xi = ((ni * self.c_in + ci) * self.h + iy as usize) * self.w + ix as usize;
                                    let wi = ((co * self.c_in + ci) * self.k + ky) * self.k + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((ni * self.c_out + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }
}

/// Reference 2x2 max pooling.
pub fn naive_maxpool2(n: usize, c: usize, h: usize, w: usize, x: &[f64], stride: usize) -> Vec<f64> {
    let ho = (h + stride - 1) / stride;
    let wo = (w + stride - 1) / stride;
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (oy * stride + dy, ox * stride + dx);
                        if iy < h && ix < w {
                            best = best.max(x[p * h * w + iy * w + ix]);
                        }
                    }
                }
                out[p * ho * wo + oy * wo + ox] = best;
            }
        }
    }
    out
}

/// Reference align-corners bilinear upsampling.
pub fn naive_upsample(n: usize, c: usize, h: usize, w: usize, x: &[f64], factor: usize) -> Vec<f64> {
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; n * c * ho * wo];
    let sy = if ho > 1 { (h as f64 - 1.0) / (ho as f64 - 1.0) } else { 0.0 };
    let sx = if wo > 1 { (w as f64 - 1.0) / (wo as f64 - 1.0) } else { 0.0 };
    for p in 0..n * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let fy = oy as f64 * sy;
                let fx = ox as f64 * sx;
                let y0 = (fy.floor() as usize).min(h - 1);
                let x0 = (fx.floor() as usize).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
                out[p * ho * wo + oy * wo + ox] = plane[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                    + plane[y0 * w + x1] * (1.0 - wy) * wx
                    + plane[y1 * w + x0] * wy * (1.0 - wx)
                    + plane[y1 * w + x1] * wy * wx;
            }
        }
    }
    out
}

/// Reference gram matrix.
pub fn naive_gram(c: usize, spatial: usize, f: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut acc = 0.0;
            for p in 0..spatial {
                acc += f[i * spatial + p] * f[j * spatial + p];
            }
            g[i * c + j] = acc;
        }
    }
    g
}

/// Reference pixel softmax cross-entropy with ignore value 255.
pub fn naive_cross_entropy(n: usize, c: usize, h: usize, w: usize, logits: &[f64], labels: &[u8]) -> f64 {
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ni in 0..n {
        for px in 0..plane {
            let label = labels[ni * plane + px];
            if label == 255 {
                continue;
            }
            let vals: Vec<f64> = (0..c).map(|ch| logits[(ni * c + ch) * plane + px]).collect();
            let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = vals.iter().map(|v| (v - m).exp()).sum();
            total -= vals[label as usize] - m - z.ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
