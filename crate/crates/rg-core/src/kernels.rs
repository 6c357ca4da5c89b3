//! Numeric primitives: dense matmuls, stabilized softmax, bilinear
//! sampling and splatting.
//!
//! These are the forward kernels; the tape in [`crate::tape`] wraps them
//! with hand-written adjoints. Sampling and splatting use zero padding:
//! out-of-extent neighbors contribute nothing.

use crate::error::{CoreError, Result};
use crate::opcount;
use crate::tensor::{Real, Tensor};

/// C[n,m] = A[n,k] · B[k,m]
pub fn matmul(a: &[Real], b: &[Real], n: usize, k: usize, m: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    opcount::add((n * k * m) as u64);
    out.fill(0.0);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// C[n,m] = A[n,k] · B[m,k]ᵀ
pub fn matmul_a_bt(a: &[Real], b: &[Real], n: usize, k: usize, m: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    opcount::add((n * k * m) as u64);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out[i * m + j] = s;
        }
    }
}

/// C[k,m] = A[n,k]ᵀ · B[n,m], accumulated into `out`.
pub fn matmul_at_b_acc(a: &[Real], b: &[Real], n: usize, k: usize, m: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    opcount::add((n * k * m) as u64);
    for p in 0..n {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Numerically stabilized softmax along `axis`. Each slice sums to 1.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(CoreError::InvalidArgument(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.numel()];
    let data = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = Real::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(data[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..axis_len {
                let e = (data[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// The four bilinear neighbors of a continuous (row, col) coordinate and
/// their weights. Neighbors may fall outside any particular grid; callers
/// drop the out-of-bounds ones.
#[inline]
pub(crate) fn bilinear_corners(u: f64, v: f64) -> [(i64, i64, f64); 4] {
    let u0 = u.floor();
    let v0 = v.floor();
    let du = u - u0;
    let dv = v - v0;
    let (r0, c0) = (u0 as i64, v0 as i64);
    [
        (r0, c0, (1.0 - du) * (1.0 - dv)),
        (r0, c0 + 1, (1.0 - du) * dv),
        (r0 + 1, c0, du * (1.0 - dv)),
        (r0 + 1, c0 + 1, du * dv),
    ]
}

/// Samples a C×H×W map at continuous (row, col) coordinates with zero
/// padding. Output is C×len.
pub fn bilinear_sample_2d(map: &Tensor, coords: &[(f64, f64)]) -> Tensor {
    let shape = map.shape();
    assert_eq!(shape.len(), 3, "bilinear_sample_2d expects a C×H×W map");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let data = map.data();
    let mut out = vec![0.0; c * coords.len()];
    for (i, &(u, v)) in coords.iter().enumerate() {
        for (r, cc, weight) in bilinear_corners(u, v) {
            if r < 0 || cc < 0 || r >= h as i64 || cc >= w as i64 || weight == 0.0 {
                continue;
            }
            let cell = r as usize * w + cc as usize;
            let wr = weight as Real;
            for ch in 0..c {
                out[ch * coords.len() + i] += wr * data[ch * h * w + cell];
            }
        }
    }
    Tensor::new(vec![c, coords.len()], out).expect("shape by construction")
}

/// Fraction of bilinear weight that falls inside the grid, per coordinate.
pub fn bilinear_coverage(coords: &[(f64, f64)], h: usize, w: usize) -> Vec<Real> {
    coords
        .iter()
        .map(|&(u, v)| {
            let mut cov = 0.0;
            for (r, c, weight) in bilinear_corners(u, v) {
                if r >= 0 && c >= 0 && r < h as i64 && c < w as i64 {
                    cov += weight;
                }
            }
            cov as Real
        })
        .collect()
}

/// Distributes C×len values onto an H×W grid with bilinear weights,
/// reversing the sampling direction. Returns the accumulated values and the
/// accumulated weight map; out-of-bounds contributions are dropped.
pub fn bilinear_splat_2d(
    values: &Tensor,
    coords: &[(f64, f64)],
    h: usize,
    w: usize,
) -> (Tensor, Tensor) {
    let shape = values.shape();
    assert_eq!(shape.len(), 2, "bilinear_splat_2d expects C×len values");
    let c = shape[0];
    let len = shape[1];
    assert_eq!(len, coords.len());
    let data = values.data();
    let mut accum = vec![0.0; c * h * w];
    let mut weight = vec![0.0; h * w];
    for (i, &(u, v)) in coords.iter().enumerate() {
        for (r, cc, wgt) in bilinear_corners(u, v) {
            if r < 0 || cc < 0 || r >= h as i64 || cc >= w as i64 || wgt == 0.0 {
                continue;
            }
            let cell = r as usize * w + cc as usize;
            let wr = wgt as Real;
            weight[cell] += wr;
            for ch in 0..c {
                accum[ch * h * w + cell] += wr * data[ch * len + i];
            }
        }
    }
    (
        Tensor::new(vec![c, h, w], accum).expect("shape by construction"),
        Tensor::new(vec![h, w], weight).expect("shape by construction"),
    )
}

/// 2×2 mean pooling per channel. Extents must be even.
pub fn mean_pool2(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(CoreError::InvalidArgument(
            "mean_pool2 expects a C×H×W tensor".into(),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "mean_pool2 requires even extents, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for r in 0..oh {
            for cc in 0..ow {
                let base = ch * h * w + 2 * r * w + 2 * cc;
                out[ch * oh * ow + r * ow + cc] =
                    0.25 * (data[base] + data[base + 1] + data[base + w] + data[base + w + 1]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}
