//! Dense f32 tensors and the convolution kernels behind the graph ops.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs len {}", data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Spatial dims of a `[C, D, H, W]` tensor.
    pub fn spatial(&self) -> [usize; 3] {
        assert_eq!(self.shape.len(), 4, "expected [C, D, H, W], got {:?}", self.shape);
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = alpha * a·b + beta * c` with row-major `a: m×k`, `b: k×n`, `c: m×n`.
/// `trans_a`/`trans_b` read the operand as its transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access by the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
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

pub const KERNEL: usize = 3;
pub const KVOL: usize = KERNEL * KERNEL * KERNEL;

/// Output extent of a 3-tap, padding-1 convolution.
pub fn conv_out(d: usize, stride: usize) -> usize {
    (d + 2 - KERNEL) / stride + 1
}

/// Output positions `lo..hi` along the innermost axis whose tap `kw` lands
/// inside the input (`0 <= cc·stride + kw - 1 < w`).
fn tap_range(kw: usize, stride: usize, w: usize, out: usize) -> (usize, usize) {
    let lo = usize::from(kw == 0);
    let hi = if w >= kw { ((w - kw) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds `[C, D, H, W]` into a `(C·27) × (Do·Ho·Wo)` matrix.
pub fn im2col(x: &[f32], c: usize, dims: [usize; 3], stride: usize) -> (Vec<f32>, [usize; 3]) {
    let [d, h, w] = dims;
    let od = [conv_out(d, stride), conv_out(h, stride), conv_out(w, stride)];
    let n = od[0] * od[1] * od[2];
    let mut cols = vec![0.0f32; c * KVOL * n];
    for ci in 0..c {
        let src = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..KERNEL {
            for kh in 0..KERNEL {
                for kw in 0..KERNEL {
                    let row = ci * KVOL + (kd * KERNEL + kh) * KERNEL + kw;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let mut o = 0;
                    for a in 0..od[0] {
                        let ia = (a * stride + kd) as isize - 1;
                        if ia < 0 || ia >= d as isize {
                            o += od[1] * od[2];
                            continue;
                        }
                        for b in 0..od[1] {
                            let ib = (b * stride + kh) as isize - 1;
                            if ib < 0 || ib >= h as isize {
                                o += od[2];
                                continue;
                            }
                            let base = (ia as usize * h + ib as usize) * w;
                            let (lo, hi) = tap_range(kw, stride, w, od[2]);
                            if stride == 1 {
                                let s0 = base + lo + kw - 1;
                                dst[o + lo..o + hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                            } else {
                                for cc in lo..hi {
                                    dst[o + cc] = src[base + cc * stride + kw - 1];
                                }
                            }
                            o += od[2];
                        }
                    }
                }
            }
        }
    }
    (cols, od)
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
pub fn col2im(cols: &[f32], c: usize, dims: [usize; 3], stride: usize) -> Vec<f32> {
    let [d, h, w] = dims;
    let od = [conv_out(d, stride), conv_out(h, stride), conv_out(w, stride)];
    let n = od[0] * od[1] * od[2];
    let mut x = vec![0.0f32; c * d * h * w];
    for ci in 0..c {
        let dst = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..KERNEL {
            for kh in 0..KERNEL {
                for kw in 0..KERNEL {
                    let row = ci * KVOL + (kd * KERNEL + kh) * KERNEL + kw;
                    let src = &cols[row * n..(row + 1) * n];
                    let mut o = 0;
                    for a in 0..od[0] {
                        let ia = (a * stride + kd) as isize - 1;
                        if ia < 0 || ia >= d as isize {
                            o += od[1] * od[2];
                            continue;
                        }
                        for b in 0..od[1] {
                            let ib = (b * stride + kh) as isize - 1;
                            if ib < 0 || ib >= h as isize {
                                o += od[2];
                                continue;
                            }
                            let base = (ia as usize * h + ib as usize) * w;
                            let (lo, hi) = tap_range(kw, stride, w, od[2]);
                            if stride == 1 {
                                let d0 = base + lo + kw - 1;
                                for (t, &v) in dst[d0..d0 + hi - lo].iter_mut().zip(&src[o + lo..o + hi]) {
                                    *t += v;
                                }
                            } else {
                                for cc in lo..hi {
                                    dst[base + cc * stride + kw - 1] += src[o + cc];
                                }
                            }
                            o += od[2];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Nearest-neighbour ×2 upsampling of `[C, D, H, W]`.
pub fn upsample2(x: &[f32], c: usize, dims: [usize; 3]) -> Vec<f32> {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0f32; c * d2 * h2 * w2];
    for ci in 0..c {
        for a in 0..d2 {
            for b in 0..h2 {
                let src = ((ci * d + a / 2) * h + b / 2) * w;
                let dst = ((ci * d2 + a) * h2 + b) * w2;
                for cc in 0..w2 {
                    out[dst + cc] = x[src + cc / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]; `dims` are the small (input) dims.
pub fn upsample2_backward(g: &[f32], c: usize, dims: [usize; 3]) -> Vec<f32> {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0f32; c * d * h * w];
    for ci in 0..c {
        for a in 0..d2 {
            for b in 0..h2 {
                let dst = ((ci * d + a / 2) * h + b / 2) * w;
                let src = ((ci * d2 + a) * h2 + b) * w2;
                for cc in 0..w2 {
                    out[dst + cc / 2] += g[src + cc];
                }
            }
        }
    }
    out
}

/// Moves 8 channel groups onto the 2×2×2 sub-voxel grid: input
/// `[8c, d, h, w]` → `[c, 2d, 2h, 2w]`, sub-voxel `(a, b, e)` read from
/// channel `8·ci + 4a + 2b + e`. `dims` are the input dims.
pub fn depth_to_space(x: &[f32], c: usize, dims: [usize; 3]) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    shuffle(dims, c, |src, dst| out[dst] = x[src]);
    out
}

/// Inverse permutation of [`depth_to_space`]; `dims` are the small dims.
pub fn space_to_depth(g: &[f32], c: usize, dims: [usize; 3]) -> Vec<f32> {
    let mut out = vec![0.0f32; g.len()];
    shuffle(dims, c, |src, dst| out[src] = g[dst]);
    out
}

fn shuffle(dims: [usize; 3], c: usize, mut f: impl FnMut(usize, usize)) {
    let [d, h, w] = dims;
    let (h2, w2) = (2 * h, 2 * w);
    let n = d * h * w;
    for ci in 0..c {
        for sub in 0..8 {
            let (a, b, e) = (sub >> 2, (sub >> 1) & 1, sub & 1);
            let base = (8 * ci + sub) * n;
            for z in 0..d {
                for y in 0..h {
                    let src = base + (z * h + y) * w;
                    let dst = ((ci * 2 * d + 2 * z + a) * h2 + 2 * y + b) * w2 + e;
                    for x in 0..w {
                        f(src + x, dst + 2 * x);
                    }
                }
            }
        }
    }
}

/// 2×2×2 average pooling; `dims` are the input dims (even).
pub fn avgpool2(x: &[f32], c: usize, dims: [usize; 3]) -> Vec<f32> {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (d / 2, h / 2, w / 2);
    let mut out = vec![0.0f32; c * d2 * h2 * w2];
    for ci in 0..c {
        for a in 0..d {
            for b in 0..h {
                let src = ((ci * d + a) * h + b) * w;
                let dst = ((ci * d2 + a / 2) * h2 + b / 2) * w2;
                for cc in 0..w {
                    out[dst + cc / 2] += 0.125 * x[src + cc];
                }
            }
        }
    }
    out
}

pub fn avgpool2_backward(g: &[f32], c: usize, dims: [usize; 3]) -> Vec<f32> {
    let mut up = upsample2(g, c, [dims[0] / 2, dims[1] / 2, dims[2] / 2]);
    for v in &mut up {
        *v *= 0.125;
    }
    up
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 3-tap convolution, the reference for the im2col path.
    fn naive_conv(x: &[f32], c: usize, dims: [usize; 3], w: &[f32], cout: usize, stride: usize) -> Vec<f32> {
        let od = dims.map(|d| conv_out(d, stride));
        let mut out = vec![0.0f32; cout * od[0] * od[1] * od[2]];
        for co in 0..cout {
            for a in 0..od[0] {
                for b in 0..od[1] {
                    for e in 0..od[2] {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for kd in 0..3 {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let p = [a * stride + kd, b * stride + kh, e * stride + kw];
                                        if p.iter().zip(&dims).any(|(&q, &dd)| q == 0 || q > dd) {
                                            continue;
                                        }
                                        let xi = ((ci * dims[0] + p[0] - 1) * dims[1] + p[1] - 1) * dims[2] + p[2] - 1;
                                        s += x[xi] * w[co * c * 27 + ci * 27 + (kd * 3 + kh) * 3 + kw];
                                    }
                                }
                            }
                        }
                        out[((co * od[0] + a) * od[1] + b) * od[2] + e] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let dims = [5, 6, 4];
        let (c, cout) = (2, 3);
        let x: Vec<f32> = (0..c * 120).map(|i| ((i * 37 % 11) as f32) * 0.1 - 0.5).collect();
        let w: Vec<f32> = (0..cout * c * 27).map(|i| ((i * 13 % 7) as f32) * 0.1 - 0.3).collect();
        for stride in [1, 2] {
            let (cols, od) = im2col(&x, c, dims, stride);
            let n = od.iter().product();
            let mut out = vec![0.0; cout * n];
            gemm(cout, c * 27, n, 1.0, &w, false, &cols, false, 0.0, &mut out);
            let reference = naive_conv(&x, c, dims, &w, cout, stride);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let dims = [4, 5, 6];
        let c = 2;
        let x: Vec<f32> = (0..c * 120).map(|i| (i as f32 * 0.37).sin()).collect();
        for stride in [1, 2] {
            let (cols, _) = im2col(&x, c, dims, stride);
            let y: Vec<f32> = (0..cols.len()).map(|i| (i as f32 * 0.11).cos()).collect();
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let back = col2im(&y, c, dims, stride);
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint() {
        let dims = [2, 2, 4];
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let up = upsample2(&x, 1, dims);
        let y: Vec<f32> = (0..up.len()).map(|i| (i % 5) as f32).collect();
        let lhs: f32 = up.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&upsample2_backward(&y, 1, dims)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
        let pooled = avgpool2(&up, 1, [4, 4, 8]);
        assert_eq!(pooled, x);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
