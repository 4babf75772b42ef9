//! Naive f64 reference implementations used to cross-check the f32
//! engine. Everything here is written as directly as possible (nested
//! loops, no tapes, no shared code with the crate under test) so a bug
//! in the production kernels cannot hide in its own oracle.

#[derive(Clone, Debug)]
pub struct T64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> T64 {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        T64 {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> T64 {
        T64::new(vec![0.0; shape.iter().product()], shape)
    }

    pub fn from_f32(data: &[f32], shape: &[usize]) -> T64 {
        T64::new(data.iter().map(|&v| v as f64).collect(), shape)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Elementwise binary with the same broadcast rule as the engine:
/// equal shapes, scalar, or trailing-suffix.
pub fn ew(a: &T64, b: &T64, f: impl Fn(f64, f64) -> f64) -> T64 {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return T64::new(data, &a.shape);
    }
    if b.numel() == 1 || (a.shape.len() > b.shape.len() && a.shape.ends_with(&b.shape)) {
        let nb = b.numel();
        let data = (0..a.numel()).map(|i| f(a.data[i], b.data[i % nb])).collect();
        return T64::new(data, &a.shape);
    }
    if a.numel() == 1 || (b.shape.len() > a.shape.len() && b.shape.ends_with(&a.shape)) {
        let na = a.numel();
        let data = (0..b.numel()).map(|i| f(a.data[i % na], b.data[i])).collect();
        return T64::new(data, &b.shape);
    }
    panic!("oracle ew: incompatible shapes {:?} vs {:?}", a.shape, b.shape);
}

pub fn add(a: &T64, b: &T64) -> T64 {
    ew(a, b, |x, y| x + y)
}

pub fn sub(a: &T64, b: &T64) -> T64 {
    ew(a, b, |x, y| x - y)
}

pub fn mul(a: &T64, b: &T64) -> T64 {
    ew(a, b, |x, y| x * y)
}

pub fn scale(a: &T64, c: f64) -> T64 {
    T64::new(a.data.iter().map(|&x| x * c).collect(), &a.shape)
}

pub fn add_scalar(a: &T64, c: f64) -> T64 {
    T64::new(a.data.iter().map(|&x| x + c).collect(), &a.shape)
}

pub fn matmul(a: &T64, b: &T64) -> T64 {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    assert_eq!(k, b.shape[0]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data[i * k + p] * b.data[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    T64::new(out, &[m, n])
}

pub fn bmm(a: &T64, b: &T64) -> T64 {
    let (bt, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let n = b.shape[2];
    assert_eq!(bt, b.shape[0]);
    assert_eq!(k, b.shape[1]);
    let mut out = T64::zeros(&[bt, m, n]);
    for i in 0..bt {
        let sa = T64::new(a.data[i * m * k..(i + 1) * m * k].to_vec(), &[m, k]);
        let sb = T64::new(b.data[i * k * n..(i + 1) * k * n].to_vec(), &[k, n]);
        let r = matmul(&sa, &sb);
        out.data[i * m * n..(i + 1) * m * n].copy_from_slice(&r.data);
    }
    out
}

pub fn permute(a: &T64, axes: &[usize]) -> T64 {
    let rank = a.shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape[ax]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * a.shape[d + 1];
    }
    let mut out = T64::zeros(&out_shape);
    let mut idx = vec![0usize; rank];
    for o in 0..a.numel() {
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[axes[d]];
        }
        out.data[o] = a.data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub fn reshape(a: &T64, shape: &[usize]) -> T64 {
    T64::new(a.data.clone(), shape)
}

pub fn concat(parts: &[&T64], axis: usize) -> T64 {
    let mut shape = parts[0].shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let row = shape[axis] * inner;
    let mut out = T64::zeros(&shape);
    let mut offset = 0;
    for p in parts {
        let pa = p.shape[axis];
        for o in 0..outer {
            out.data[o * row + offset..o * row + offset + pa * inner]
                .copy_from_slice(&p.data[o * pa * inner..(o + 1) * pa * inner]);
        }
        offset += pa * inner;
    }
    out
}

pub fn slice(a: &T64, axis: usize, start: usize, len: usize) -> T64 {
    let mut shape = a.shape.clone();
    shape[axis] = len;
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let src_row = a.shape[axis] * inner;
    let mut out = T64::zeros(&shape);
    for o in 0..outer {
        out.data[o * len * inner..(o + 1) * len * inner].copy_from_slice(
            &a.data[o * src_row + start * inner..o * src_row + (start + len) * inner],
        );
    }
    out
}

pub fn gather_rows(a: &T64, idx: &[usize]) -> T64 {
    let inner: usize = a.shape[1..].iter().product();
    let mut shape = a.shape.clone();
    shape[0] = idx.len();
    let mut out = T64::zeros(&shape);
    for (r, &i) in idx.iter().enumerate() {
        out.data[r * inner..(r + 1) * inner].copy_from_slice(&a.data[i * inner..(i + 1) * inner]);
    }
    out
}

pub fn scatter_rows(rows: &T64, idx: &[usize], m: usize) -> T64 {
    let inner: usize = rows.shape[1..].iter().product();
    let mut shape = rows.shape.clone();
    shape[0] = m;
    let mut out = T64::zeros(&shape);
    for (r, &i) in idx.iter().enumerate() {
        for j in 0..inner {
            out.data[i * inner + j] += rows.data[r * inner + j];
        }
    }
    out
}

/// Direct convolution, NCHW, square kernel with same padding.
pub fn conv2d(x: &T64, w: &T64, b: &T64, stride: usize) -> T64 {
    let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, k) = (w.shape[0], w.shape[2]);
    assert_eq!(w.shape[1], ci);
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = T64::zeros(&[n, co, oh, ow]);
    for s in 0..n {
        for c in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data[c];
                    for ic in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((s * ci + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((c * ci + ic) * k + ky) * k + kx;
                                acc += x.data[xi] * w.data[wi];
                            }
                        }
                    }
                    out.data[((s * co + c) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn upsample2x(x: &T64) -> T64 {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = T64::zeros(&[n, c, 2 * h, 2 * w]);
    for nc in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.data[(nc * 2 * h + y) * 2 * w + xx] = x.data[(nc * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn group_norm(x: &T64, groups: usize, gamma: &T64, beta: &T64, eps: f64) -> T64 {
    let (n, c) = (x.shape[0], x.shape[1]);
    let s: usize = x.shape[2..].iter().product();
    let cg = c / groups;
    let mut out = T64::zeros(&x.shape);
    for ni in 0..n {
        for g in 0..groups {
            let mut sum = 0.0;
            let mut count = 0;
            for ci in g * cg..(g + 1) * cg {
                for si in 0..s {
                    sum += x.data[(ni * c + ci) * s + si];
                    count += 1;
                }
            }
            let mean = sum / count as f64;
            let mut var = 0.0;
            for ci in g * cg..(g + 1) * cg {
                for si in 0..s {
                    let d = x.data[(ni * c + ci) * s + si] - mean;
                    var += d * d;
                }
            }
            var /= count as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for ci in g * cg..(g + 1) * cg {
                for si in 0..s {
                    let idx = (ni * c + ci) * s + si;
                    out.data[idx] =
                        (x.data[idx] - mean) * rstd * gamma.data[ci] + beta.data[ci];
                }
            }
        }
    }
    out
}

pub fn silu(a: &T64) -> T64 {
    T64::new(
        a.data.iter().map(|&x| x / (1.0 + (-x).exp())).collect(),
        &a.shape,
    )
}

pub fn gelu(a: &T64) -> T64 {
    let c = 0.7978845608028654;
    let k = 0.044715;
    T64::new(
        a.data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (c * (x + k * x * x * x)).tanh()))
            .collect(),
        &a.shape,
    )
}

pub fn softmax_last(a: &T64) -> T64 {
    let row = *a.shape.last().unwrap();
    let mut out = T64::zeros(&a.shape);
    for r in 0..a.numel() / row {
        let xs = &a.data[r * row..(r + 1) * row];
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out.data[r * row + j] = e / z;
        }
    }
    out
}

pub fn sum_all(a: &T64) -> f64 {
    a.data.iter().sum()
}

pub fn mean_all(a: &T64) -> f64 {
    sum_all(a) / a.numel() as f64
}

pub fn add_bias_c(x: &T64, b: &T64) -> T64 {
    let (n, c) = (x.shape[0], x.shape[1]);
    let s: usize = x.shape[2..].iter().product();
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            for si in 0..s {
                out.data[(ni * c + ci) * s + si] += b.data[ci];
            }
        }
    }
    out
}

pub fn add_bias_nc(x: &T64, b: &T64) -> T64 {
    let (n, c) = (x.shape[0], x.shape[1]);
    let s: usize = x.shape[2..].iter().product();
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            for si in 0..s {
                out.data[(ni * c + ci) * s + si] += b.data[ni * c + ci];
            }
        }
    }
    out
}

pub fn masked_mse(pred: &T64, target: &T64, mask: &T64) -> f64 {
    let nnz = mask.data.iter().filter(|&&v| v != 0.0).count();
    let count = nnz * (pred.numel() / mask.numel());
    if count == 0 {
        return 0.0;
    }
    let nm = mask.numel();
    let mut acc = 0.0;
    for i in 0..pred.numel() {
        let d = (pred.data[i] - target.data[i]) * mask.data[i % nm];
        acc += d * d;
    }
    acc / count as f64
}

/// Central finite difference of `f` with respect to every element of the
/// parameter at `which`, leaving all other parameters untouched.
pub fn fd_grad(params: &[T64], which: usize, h: f64, f: impl Fn(&[T64]) -> f64) -> Vec<f64> {
    let mut grads = Vec::with_capacity(params[which].numel());
    for i in 0..params[which].numel() {
        let mut up = params.to_vec();
        up[which].data[i] += h;
        let mut dn = params.to_vec();
        dn[which].data[i] -= h;
        grads.push((f(&up) - f(&dn)) / (2.0 * h));
    }
    grads
}

/// Relative agreement check with an absolute floor for near-zero values.
pub fn assert_close(name: &str, got: &[f32], want: &[f64], rel_tol: f64, abs_floor: f64) {
    assert_eq!(got.len(), want.len(), "{name}: length mismatch");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        let denom = w.abs().max(abs_floor);
        let rel = ((g as f64) - w).abs() / denom;
        assert!(
            rel <= rel_tol,
            "{name}[{i}]: got {g}, want {w}, rel err {rel:.3e} > {rel_tol:e}"
        );
    }
}
