//! Raw f32 compute kernels shared by the recorded and inference paths.
//!
//! Matrix products go through `matrixmultiply`; everything else is plain
//! loops. All layouts are row-major and dense.

use crate::error::{Error, Result};

/// C[m x n] (+)= A op B with optional logical transposes. `ta` means the
/// buffer `a` stores the transpose of the logical A (so strides swap), and
/// likewise `tb`. `beta` scales the existing contents of `c`.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
) -> Result<ConvDims> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected 4-d input and weight, got {x_shape:?} and {w_shape:?}"),
        ));
    }
    let (n, ci, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (co, wci, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if wci != ci {
        return Err(Error::shape(
            "conv2d",
            format!("weight expects {wci} input channels, input has {ci}"),
        ));
    }
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be 1x1 or 3x3, got {kh}x{kw}"),
        ));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::shape(
            "conv2d",
            format!("stride must be 1 or 2, got {stride}"),
        ));
    }
    let pad = kh / 2;
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape("conv2d", format!("input {h}x{w} too small")));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        n,
        ci,
        h,
        w,
        co,
        k: kh,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Unfolds one sample into `[oh*ow, ci*k*k]` patch rows.
fn im2col_sample(x: &[f32], d: &ConvDims, cols: &mut [f32]) {
    let kk = d.k * d.k;
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let row = (oy * d.ow + ox) * d.ci * kk;
            for c in 0..d.ci {
                let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
                for ky in 0..d.k {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    for kx in 0..d.k {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        let v = if iy >= 0
                            && (iy as usize) < d.h
                            && ix >= 0
                            && (ix as usize) < d.w
                        {
                            plane[iy as usize * d.w + ix as usize]
                        } else {
                            0.0
                        };
                        cols[row + (c * d.k + ky) * d.k + kx] = v;
                    }
                }
            }
        }
    }
}

/// Folds `[oh*ow, ci*k*k]` patch-row gradients back onto one input sample.
fn col2im_sample(cols: &[f32], d: &ConvDims, dx: &mut [f32]) {
    let kk = d.k * d.k;
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let row = (oy * d.ow + ox) * d.ci * kk;
            for c in 0..d.ci {
                for ky in 0..d.k {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for kx in 0..d.k {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        dx[(c * d.h + iy as usize) * d.w + ix as usize] +=
                            cols[row + (c * d.k + ky) * d.k + kx];
                    }
                }
            }
        }
    }
}

/// out[n, co, oh, ow] = conv(x, w) + bias.
pub fn conv2d_fwd(x: &[f32], wgt: &[f32], bias: &[f32], d: &ConvDims) -> Vec<f32> {
    let kk = d.ci * d.k * d.k;
    let spatial = d.oh * d.ow;
    let mut out = vec![0.0f32; d.n * d.co * spatial];
    let mut cols = vec![0.0f32; spatial * kk];
    for s in 0..d.n {
        im2col_sample(&x[s * d.ci * d.h * d.w..(s + 1) * d.ci * d.h * d.w], d, &mut cols);
        let o = &mut out[s * d.co * spatial..(s + 1) * d.co * spatial];
        // [co, spatial] = W [co, kk] x cols^T [kk, spatial]
        gemm(d.co, kk, spatial, wgt, false, &cols, true, 0.0, o);
        for c in 0..d.co {
            let bv = bias[c];
            for v in &mut o[c * spatial..(c + 1) * spatial] {
                *v += bv;
            }
        }
    }
    out
}

/// Gradients for input, weight, and bias of conv2d.
pub fn conv2d_bwd(
    x: &[f32],
    wgt: &[f32],
    dy: &[f32],
    d: &ConvDims,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let kk = d.ci * d.k * d.k;
    let spatial = d.oh * d.ow;
    let mut dx = vec![0.0f32; d.n * d.ci * d.h * d.w];
    let mut dw = vec![0.0f32; d.co * kk];
    let mut db = vec![0.0f32; d.co];
    let mut cols = vec![0.0f32; spatial * kk];
    let mut dcols = vec![0.0f32; spatial * kk];
    for s in 0..d.n {
        let xs = &x[s * d.ci * d.h * d.w..(s + 1) * d.ci * d.h * d.w];
        let dys = &dy[s * d.co * spatial..(s + 1) * d.co * spatial];
        im2col_sample(xs, d, &mut cols);
        // dW [co, kk] += dy_s [co, spatial] x cols [spatial, kk]
        gemm(d.co, spatial, kk, dys, false, &cols, false, 1.0, &mut dw);
        // dcols [spatial, kk] = dy_s^T [spatial, co] x W [co, kk]
        gemm(spatial, d.co, kk, dys, true, wgt, false, 0.0, &mut dcols);
        col2im_sample(&dcols, d, &mut dx[s * d.ci * d.h * d.w..(s + 1) * d.ci * d.h * d.w]);
        for c in 0..d.co {
            db[c] += dys[c * spatial..(c + 1) * spatial].iter().sum::<f32>();
        }
    }
    (dx, dw, db)
}

/// Nearest-neighbour 2x upsample of NCHW.
pub fn upsample2x_fwd(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * c * 4 * h * w];
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xcol in 0..ow {
                dst[y * ow + xcol] = src[(y / 2) * w + xcol / 2];
            }
        }
    }
    out
}

pub fn upsample2x_bwd(dy: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; n * c * h * w];
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..n * c {
        let src = &mut dx[p * h * w..(p + 1) * h * w];
        let up = &dy[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xcol in 0..ow {
                src[(y / 2) * w + xcol / 2] += up[y * ow + xcol];
            }
        }
    }
    dx
}

/// Group normalization over `[n, c, s]` with affine per-channel scale and
/// shift. Returns output plus the per-(sample, group) mean and reciprocal
/// standard deviation needed by the backward pass.
pub fn group_norm_fwd(
    x: &[f32],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cg = c / groups;
    let gsz = cg * s;
    let mut out = vec![0.0f32; x.len()];
    let mut means = vec![0.0f32; n * groups];
    let mut rstds = vec![0.0f32; n * groups];
    for ni in 0..n {
        for g in 0..groups {
            let base = ni * c * s + g * cg * s;
            let chunk = &x[base..base + gsz];
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / gsz as f64;
            let var = chunk
                .iter()
                .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                .sum::<f64>()
                / gsz as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            means[ni * groups + g] = mean as f32;
            rstds[ni * groups + g] = rstd as f32;
            for j in 0..cg {
                let ch = g * cg + j;
                let (ga, be) = (gamma[ch], beta[ch]);
                for t in 0..s {
                    let idx = base + j * s + t;
                    let xhat = ((x[idx] as f64 - mean) * rstd) as f32;
                    out[idx] = ga * xhat + be;
                }
            }
        }
    }
    (out, means, rstds)
}

pub fn group_norm_bwd(
    x: &[f32],
    dy: &[f32],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    gamma: &[f32],
    means: &[f32],
    rstds: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cg = c / groups;
    let gsz = (cg * s) as f64;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ni in 0..n {
        for g in 0..groups {
            let base = ni * c * s + g * cg * s;
            let mean = means[ni * groups + g] as f64;
            let rstd = rstds[ni * groups + g] as f64;
            let mut sum_dxh = 0.0f64;
            let mut sum_dxh_xh = 0.0f64;
            for j in 0..cg {
                let ch = g * cg + j;
                for t in 0..s {
                    let idx = base + j * s + t;
                    let xhat = (x[idx] as f64 - mean) * rstd;
                    let dyv = dy[idx] as f64;
                    dgamma[ch] += (dyv * xhat) as f32;
                    dbeta[ch] += dy[idx];
                    let dxh = dyv * gamma[ch] as f64;
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat;
                }
            }
            let m1 = sum_dxh / gsz;
            let m2 = sum_dxh_xh / gsz;
            for j in 0..cg {
                let ch = g * cg + j;
                for t in 0..s {
                    let idx = base + j * s + t;
                    let xhat = (x[idx] as f64 - mean) * rstd;
                    let dxh = dy[idx] as f64 * gamma[ch] as f64;
                    dx[idx] = (rstd * (dxh - m1 - xhat * m2)) as f32;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax over the last axis.
pub fn softmax_last_fwd(x: &[f32], row: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (xr, or) in x.chunks_exact(row).zip(out.chunks_exact_mut(row)) {
        let max = xr.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0f64;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = ((v - max) as f64).exp();
            *o = e as f32;
            sum += e;
        }
        let inv = (1.0 / sum) as f32;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
    out
}

pub fn softmax_last_bwd(y: &[f32], dy: &[f32], row: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for ((yr, dyr), dxr) in y
        .chunks_exact(row)
        .zip(dy.chunks_exact(row))
        .zip(dx.chunks_exact_mut(row))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(&a, &b)| a as f64 * b as f64).sum();
        for i in 0..row {
            dxr[i] = yr[i] * (dyr[i] - dot as f32);
        }
    }
    dx
}

pub fn silu_fwd(x: &[f32]) -> Vec<f32> {
    x.iter()
        .map(|&v| {
            let s = 1.0 / (1.0 + (-v as f64).exp());
            (v as f64 * s) as f32
        })
        .collect()
}

pub fn silu_bwd(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = 1.0 / (1.0 + (-v as f64).exp());
            (g as f64 * s * (1.0 + v as f64 * (1.0 - s))) as f32
        })
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_fwd(x: &[f32]) -> Vec<f32> {
    x.iter()
        .map(|&v| {
            let v = v as f64;
            let u = GELU_C * (v + GELU_A * v * v * v);
            (0.5 * v * (1.0 + u.tanh())) as f32
        })
        .collect()
}

pub fn gelu_bwd(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let v = v as f64;
            let u = GELU_C * (v + GELU_A * v * v * v);
            let t = u.tanh();
            let sech2 = 1.0 - t * t;
            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
            (g as f64 * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du)) as f32
        })
        .collect()
}

/// Copies `src` (shape `s_shape`) permuted by `axes` into a fresh buffer.
pub fn permute_copy(src: &[f32], s_shape: &[usize], axes: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let rank = s_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| s_shape[a]).collect();
    let mut s_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        s_strides[i] = s_strides[i + 1] * s_shape[i + 1];
    }
    let perm_strides: Vec<usize> = axes.iter().map(|&a| s_strides[a]).collect();
    let mut out = vec![0.0f32; src.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut off = 0;
        for d in 0..rank {
            off += idx[d] * perm_strides[d];
        }
        *slot = src[off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small_hand_case() {
        // [1 2; 3 4] x [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transposed_operands() {
        // a stores A^T for A = [1 2 3; 4 5 6] (2x3)
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0f32; 4];
        gemm(2, 3, 2, &at, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        // 1x1 kernel with weight 1 reproduces the input.
        let d = conv_dims(&[1, 1, 2, 2], &[1, 1, 1, 1], 1).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        let out = conv2d_fwd(&x, &[1.0], &[0.0], &d);
        assert_eq!(out, x);
    }

    #[test]
    fn conv3x3_center_sum() {
        // All-ones 3x3 kernel on all-ones 3x3 input: center sees 9, edges
        // see the zero-padded neighbourhood.
        let d = conv_dims(&[1, 1, 3, 3], &[1, 1, 3, 3], 1).unwrap();
        let x = [1.0f32; 9];
        let w = [1.0f32; 9];
        let out = conv2d_fwd(&x, &w, &[0.0], &d);
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn conv_stride2_halves_resolution() {
        let d = conv_dims(&[1, 1, 4, 4], &[1, 1, 3, 3], 2).unwrap();
        assert_eq!((d.oh, d.ow), (2, 2));
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let x: Vec<f32> = (0..4).map(|v| v as f32).collect();
        let up = upsample2x_fwd(&x, 1, 1, 2, 2);
        assert_eq!(up.len(), 16);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[1], 0.0);
        assert_eq!(up[2], 1.0);
        let down = upsample2x_bwd(&up, 1, 1, 2, 2);
        // Each input cell collects its four copies.
        assert_eq!(down, vec![0.0, 4.0, 8.0, 12.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = softmax_last_fwd(&[1.0, 2.0, 3.0, -1.0, 0.0, 1.0], 3);
        let s1: f32 = y[..3].iter().sum();
        let s2: f32 = y[3..].iter().sum();
        assert!((s1 - 1.0).abs() < 1e-6);
        assert!((s2 - 1.0).abs() < 1e-6);
        assert!(y[2] > y[1] && y[1] > y[0]);
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let x = [1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0];
        let (y, _, _) =
            group_norm_fwd(&x, 1, 2, 4, 2, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        for g in 0..2 {
            let chunk = &y[g * 4..(g + 1) * 4];
            let mean: f32 = chunk.iter().sum::<f32>() / 4.0;
            let var: f32 = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (y, shape) = permute_copy(&x, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(y, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
