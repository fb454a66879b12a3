//! Forward and backward compute kernels on flat row-major buffers.
//!
//! Everything here is single-threaded with a fixed iteration order, so a
//! given input always produces bitwise-identical output. The tape wraps
//! these into differentiable operations; the kernels themselves know
//! nothing about recording.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, IGNORE_LABEL};

/// Geometry of one conv2d application, resolved from input + weight shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_y: usize,
    pub pad_x: usize,
    pub h_out: usize,
    pub w_out: usize,
}

fn ceil_div(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

impl ConvSpec {
    /// Spatial output is `ceil(extent / stride)`; padding is chosen to make
    /// that hold (symmetric for stride 1, extra pixel at the end otherwise).
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::invalid(format!("conv2d input must be NCHW, got {input_shape:?}")));
        }
        if weight_shape.len() != 4 || weight_shape[2] != weight_shape[3] {
            return Err(Error::invalid(format!("conv2d weight must be OIKK, got {weight_shape:?}")));
        }
        let (n, c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (c_out, w_in, k) = (weight_shape[0], weight_shape[1], weight_shape[2]);
        if k != 1 && k != 3 {
            return Err(Error::invalid(format!("conv2d kernel must be 1x1 or 3x3, got {k}x{k}")));
        }
        if w_in != c_in {
            return Err(Error::invalid(format!(
                "conv2d channel mismatch: input has {c_in}, weight expects {w_in}"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv2d stride and dilation must be >= 1"));
        }
        let h_out = ceil_div(h, stride);
        let w_out = ceil_div(w, stride);
        let eff_k = (k - 1) * dilation + 1;
        let pad_total_y = ((h_out - 1) * stride + eff_k).saturating_sub(h);
        let pad_total_x = ((w_out - 1) * stride + eff_k).saturating_sub(w);
        Ok(ConvSpec {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            dilation,
            pad_y: pad_total_y / 2,
            pad_x: pad_total_x / 2,
            h_out,
            w_out,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Unroll one sample's receptive fields into a (c_in*k*k, h_out*w_out) matrix.
fn im2col<E: Scalar>(spec: &ConvSpec, x: &[E], cols: &mut [E]) {
    let (h, w) = (spec.h, spec.w);
    let (ho, wo) = (spec.h_out, spec.w_out);
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), spec.patch_len() * plane);
    let mut row = 0usize;
    for c in 0..spec.c_in {
        let x_plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..spec.k {
            for kx in 0..spec.k {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad_y as isize;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        for v in dst_row.iter_mut() {
                            *v = E::zero();
                        }
                        continue;
                    }
                    let src_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad_x as isize;
                        dst_row[ox] = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the column matrix back onto the input layout.
fn col2im_add<E: Scalar>(spec: &ConvSpec, cols: &[E], dx: &mut [E]) {
    let (h, w) = (spec.h, spec.w);
    let (ho, wo) = (spec.h_out, spec.w_out);
    let plane = ho * wo;
    let mut row = 0usize;
    for c in 0..spec.c_in {
        let dx_plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..spec.k {
            for kx in 0..spec.k {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad_y as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dx_plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad_x as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src_row[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y[n] = weight_matrix @ im2col(x[n]) + bias`
pub fn conv2d_forward<E: Scalar>(spec: &ConvSpec, x: &[E], weight: &[E], bias: Option<&[E]>) -> Vec<E> {
    let plane = spec.h_out * spec.w_out;
    let in_plane = spec.c_in * spec.h * spec.w;
    let patch = spec.patch_len();
    let mut out = vec![E::zero(); spec.n * spec.c_out * plane];
    let pointwise = spec.k == 1 && spec.stride == 1;
    let mut cols = if pointwise { Vec::new() } else { vec![E::zero(); patch * plane] };
    for ni in 0..spec.n {
        let x_n = &x[ni * in_plane..(ni + 1) * in_plane];
        let out_n = &mut out[ni * spec.c_out * plane..(ni + 1) * spec.c_out * plane];
        let cols_ref: &[E] = if pointwise {
            x_n
        } else {
            im2col(spec, x_n, &mut cols);
            &cols
        };
        E::gemm(spec.c_out, patch, plane, E::one(), weight, cols_ref, E::zero(), out_n);
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                for v in &mut out_n[o * plane..(o + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of conv2d. Any of the output slots may be `None` to skip work
/// for inputs that do not require gradients.
pub fn conv2d_backward<E: Scalar>(
    spec: &ConvSpec,
    x: &[E],
    weight: &[E],
    dy: &[E],
    dx: Option<&mut Vec<E>>,
    dw: Option<&mut Vec<E>>,
    db: Option<&mut Vec<E>>,
) {
    let plane = spec.h_out * spec.w_out;
    let in_plane = spec.c_in * spec.h * spec.w;
    let patch = spec.patch_len();
    let pointwise = spec.k == 1 && spec.stride == 1;

    if let Some(db) = db {
        debug_assert_eq!(db.len(), spec.c_out);
        for ni in 0..spec.n {
            for o in 0..spec.c_out {
                let base = (ni * spec.c_out + o) * plane;
                let mut acc = E::zero();
                for &g in &dy[base..base + plane] {
                    acc += g;
                }
                db[o] += acc;
            }
        }
    }

    let need_dx = dx.is_some();
    let need_dw = dw.is_some();
    if !need_dx && !need_dw {
        return;
    }

    let mut cols = if pointwise || !need_dw { Vec::new() } else { vec![E::zero(); patch * plane] };
    let mut dcols = if pointwise { Vec::new() } else { vec![E::zero(); patch * plane] };
    let mut dx = dx;
    let mut dw = dw;

    for ni in 0..spec.n {
        let x_n = &x[ni * in_plane..(ni + 1) * in_plane];
        let dy_n = &dy[ni * spec.c_out * plane..(ni + 1) * spec.c_out * plane];

        if let Some(dw) = dw.as_deref_mut() {
            // dW += dY_n @ cols^T
            let cols_ref: &[E] = if pointwise {
                x_n
            } else {
                im2col(spec, x_n, &mut cols);
                &cols
            };
            gemm_b_transposed(spec.c_out, plane, patch, dy_n, cols_ref, dw);
        }

        if let Some(dx) = dx.as_deref_mut() {
            let dx_n = &mut dx[ni * in_plane..(ni + 1) * in_plane];
            if pointwise {
                // dX_n += W^T @ dY_n, accumulated directly.
                gemm_a_transposed_acc(patch, spec.c_out, plane, weight, dy_n, dx_n);
            } else {
                for v in dcols.iter_mut() {
                    *v = E::zero();
                }
                gemm_a_transposed_acc(patch, spec.c_out, plane, weight, dy_n, &mut dcols);
                col2im_add(spec, &dcols, dx_n);
            }
        }
    }
}

/// c(m,n) += a(m,k) @ b(n,k)^T
fn gemm_b_transposed<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    // Row-major b with swapped strides expresses the transpose without a copy.
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    E::gemm_strided(m, k, n, a, k as isize, 1, b, 1, k as isize, c);
}

/// c(m,n) += a(k,m)^T @ b(k,n)
fn gemm_a_transposed_acc<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    E::gemm_strided(m, k, n, a, 1, m as isize, b, n as isize, 1, c);
}

/// 2x2 max pooling. Stride 2 halves spatial extents (rounding up); stride 1
/// keeps them (window clipped at the bottom/right edge). Returns the pooled
/// values and, per output element, the flat plane index of its argmax
/// (first occurrence wins ties).
pub fn maxpool2_forward<E: Scalar>(
    shape: &[usize],
    x: &[E],
    stride: usize,
) -> Result<(Vec<E>, Vec<u32>, [usize; 4])> {
    if shape.len() != 4 {
        return Err(Error::invalid(format!("maxpool2 input must be NCHW, got {shape:?}")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::invalid(format!("maxpool2 stride must be 1 or 2, got {stride}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (ceil_div(h, stride), ceil_div(w, stride));
    let mut out = vec![E::zero(); n * c * ho * wo];
    let mut argmax = vec![0u32; n * c * ho * wo];
    for p in 0..n * c {
        let x_plane = &x[p * h * w..(p + 1) * h * w];
        let out_plane = &mut out[p * ho * wo..(p + 1) * ho * wo];
        let arg_plane = &mut argmax[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let y0 = oy * stride;
                let x0 = ox * stride;
                let mut best_idx = y0 * w + x0;
                let mut best = x_plane[best_idx];
                for dy in 0..2usize {
                    for dx in 0..2usize {
                        let (iy, ix) = (y0 + dy, x0 + dx);
                        if iy >= h || ix >= w || (dy == 0 && dx == 0) {
                            continue;
                        }
                        let idx = iy * w + ix;
                        if x_plane[idx] > best {
                            best = x_plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out_plane[oy * wo + ox] = best;
                arg_plane[oy * wo + ox] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax, [n, c, ho, wo]))
}

/// Routes each output gradient to the recorded argmax position.
pub fn maxpool2_backward<E: Scalar>(
    in_shape: &[usize],
    out_shape: &[usize; 4],
    argmax: &[u32],
    dy: &[E],
    dx: &mut [E],
) {
    let (h, w) = (in_shape[2], in_shape[3]);
    let plane_out = out_shape[2] * out_shape[3];
    for p in 0..out_shape[0] * out_shape[1] {
        let dx_plane = &mut dx[p * h * w..(p + 1) * h * w];
        let dy_plane = &dy[p * plane_out..(p + 1) * plane_out];
        let arg_plane = &argmax[p * plane_out..(p + 1) * plane_out];
        for (i, &g) in dy_plane.iter().enumerate() {
            dx_plane[arg_plane[i] as usize] += g;
        }
    }
}

pub fn relu_forward<E: Scalar>(x: &[E]) -> Vec<E> {
    x.iter().map(|&v| if v > E::zero() { v } else { E::zero() }).collect()
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward<E: Scalar>(x: &[E], dy: &[E], dx: &mut [E]) {
    for i in 0..x.len() {
        if x[i] > E::zero() {
            dx[i] += dy[i];
        }
    }
}

/// Bilinear interpolation weights for one axis under the align-corners
/// convention: corner samples map exactly onto corner samples.
fn upsample_axis(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = if len_out > 1 { (len_in as f64 - 1.0) / (len_out as f64 - 1.0) } else { 0.0 };
    (0..len_out)
        .map(|o| {
            let src = o as f64 * scale;
            let i0 = src.floor() as usize;
            let i0 = i0.min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_forward<E: Scalar>(shape: &[usize], x: &[E], factor: usize) -> Result<(Vec<E>, [usize; 4])> {
    if shape.len() != 4 {
        return Err(Error::invalid(format!("upsample input must be NCHW, got {shape:?}")));
    }
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let ys = upsample_axis(h, ho);
    let xs = upsample_axis(w, wo);
    let mut out = vec![E::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let x_plane = &x[p * h * w..(p + 1) * h * w];
        let out_plane = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let wy = E::from_f64(wy);
            let one_m_wy = E::one() - wy;
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let wx = E::from_f64(wx);
                let top = x_plane[y0 * w + x0] * (E::one() - wx) + x_plane[y0 * w + x1] * wx;
                let bot = x_plane[y1 * w + x0] * (E::one() - wx) + x_plane[y1 * w + x1] * wx;
                out_plane[oy * wo + ox] = top * one_m_wy + bot * wy;
            }
        }
    }
    Ok((out, [n, c, ho, wo]))
}

pub fn upsample_backward<E: Scalar>(in_shape: &[usize], factor: usize, dy: &[E], dx: &mut [E]) {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let ys = upsample_axis(h, ho);
    let xs = upsample_axis(w, wo);
    for p in 0..n * c {
        let dx_plane = &mut dx[p * h * w..(p + 1) * h * w];
        let dy_plane = &dy[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let wy = E::from_f64(wy);
            let one_m_wy = E::one() - wy;
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let g = dy_plane[oy * wo + ox];
                let wx = E::from_f64(wx);
                let one_m_wx = E::one() - wx;
                dx_plane[y0 * w + x0] += g * one_m_wy * one_m_wx;
                dx_plane[y0 * w + x1] += g * one_m_wy * wx;
                dx_plane[y1 * w + x0] += g * wy * one_m_wx;
                dx_plane[y1 * w + x1] += g * wy * wx;
            }
        }
    }
}

/// Mean over non-ignored pixels of the per-pixel negative log softmax at
/// the true class. Returns (loss, number of scored pixels).
pub fn cross_entropy_forward<E: Scalar>(
    shape: &[usize],
    logits: &[E],
    labels: &[u8],
) -> Result<(E, usize)> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if labels.len() != n * h * w {
        return Err(Error::invalid(format!(
            "label count {} does not match logits batch {}x{}x{}",
            labels.len(),
            n,
            h,
            w
        )));
    }
    let plane = h * w;
    let mut total = E::zero();
    let mut n_valid = 0usize;
    for ni in 0..n {
        let base = ni * c * plane;
        for px in 0..plane {
            let label = labels[ni * plane + px];
            if label == IGNORE_LABEL {
                continue;
            }
            if label as usize >= c {
                return Err(Error::invalid(format!(
                    "label {label} out of range for {c} classes (and not the ignore value)"
                )));
            }
            n_valid += 1;
            let mut max = logits[base + px];
            for ch in 1..c {
                let v = logits[base + ch * plane + px];
                if v > max {
                    max = v;
                }
            }
            let mut z = E::zero();
            for ch in 0..c {
                z += (logits[base + ch * plane + px] - max).exp();
            }
            let logp = logits[base + label as usize * plane + px] - max - z.ln();
            total -= logp;
        }
    }
    if n_valid > 0 {
        total = total / E::from_f64(n_valid as f64);
    }
    Ok((total, n_valid))
}

/// `(softmax - onehot) * dloss / n_valid` per scored pixel.
pub fn cross_entropy_backward<E: Scalar>(
    shape: &[usize],
    logits: &[E],
    labels: &[u8],
    n_valid: usize,
    dloss: E,
    dlogits: &mut [E],
) {
    if n_valid == 0 {
        return;
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let scale = dloss / E::from_f64(n_valid as f64);
    let mut probs = vec![E::zero(); c];
    for ni in 0..n {
        let base = ni * c * plane;
        for px in 0..plane {
            let label = labels[ni * plane + px];
            if label == IGNORE_LABEL {
                continue;
            }
            let mut max = logits[base + px];
            for ch in 1..c {
                let v = logits[base + ch * plane + px];
                if v > max {
                    max = v;
                }
            }
            let mut z = E::zero();
            for ch in 0..c {
                let e = (logits[base + ch * plane + px] - max).exp();
                probs[ch] = e;
                z += e;
            }
            for ch in 0..c {
                let mut g = probs[ch] / z;
                if ch == label as usize {
                    g -= E::one();
                }
                dlogits[base + ch * plane + px] += g * scale;
            }
        }
    }
}

/// Channel co-occurrence matrix `G[i][j] = sum_p F[i][p] * F[j][p]` of a
/// single (C,H,W) feature map.
pub fn gram_forward<E: Scalar>(c: usize, spatial: usize, f: &[E]) -> Vec<E> {
    let mut g = vec![E::zero(); c * c];
    gemm_b_transposed(c, spatial, c, f, f, &mut g);
    g
}

/// `dF = (dG + dG^T) @ F`
pub fn gram_backward<E: Scalar>(c: usize, spatial: usize, f: &[E], dg: &[E], df: &mut [E]) {
    let mut sym = vec![E::zero(); c * c];
    for i in 0..c {
        for j in 0..c {
            sym[i * c + j] = dg[i * c + j] + dg[j * c + i];
        }
    }
    let mut out = vec![E::zero(); c * spatial];
    E::gemm(c, c, spatial, E::one(), &sym, f, E::zero(), &mut out);
    for i in 0..df.len() {
        df[i] += out[i];
    }
}

/// Per-pixel argmax over the channel axis of (N,C,H,W) logits.
pub fn argmax_channels<E: Scalar>(shape: &[usize], logits: &[E]) -> Vec<u8> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut out = vec![0u8; n * plane];
    for ni in 0..n {
        let base = ni * c * plane;
        for px in 0..plane {
            let mut best = logits[base + px];
            let mut best_c = 0usize;
            for ch in 1..c {
                let v = logits[base + ch * plane + px];
                if v > best {
                    best = v;
                    best_c = ch;
                }
            }
            out[ni * plane + px] = best_c as u8;
        }
    }
    out
}
