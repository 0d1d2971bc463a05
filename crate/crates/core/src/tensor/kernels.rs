//! Slice-level numeric kernels shared by the tape's forward and backward rules.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
/// when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths were checked against m, k and n.
    unsafe {
        matrixmultiply::dgemm(
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

/// Geometry of a square-kernel 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*k*k, Ho*Wo]` column matrix.
pub fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if y < 0 || y >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if x < 0 || x >= g.width as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image gradient.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..wo {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along the middle extent of an
/// `(outer, len, inner)` view.
pub fn softmax_axis(x: &[f64], outer: usize, len: usize, inner: usize, out: &mut [f64]) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |j: usize| base + j * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[idx(j)]);
            }
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (with `shape`) into `dst` with axes `a` and `b` swapped.
pub fn swap_axes(src: &[f64], shape: &[usize], a: usize, b: usize, dst: &mut [f64]) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let in_strides = strides(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(a, b);
    let rank = shape.len();
    let mut index = vec![0usize; rank];
    let mut src_off = 0usize;
    for v in dst.iter_mut() {
        *v = src[src_off];
        // odometer increment over the output index
        for d in (0..rank).rev() {
            index[d] += 1;
            src_off += perm_strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            src_off -= perm_strides[d] * out_shape[d];
            index[d] = 0;
        }
    }
}

/// Sums `grad` (shaped like `out_shape`) down to `in_shape`, where every axis
/// of `in_shape` either matches or has extent 1.
pub fn reduce_broadcast(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    let n_in: usize = in_shape.iter().product();
    let mut acc = vec![0.0; n_in];
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = in_shape
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let rank = out_shape.len();
    let mut index = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad {
        acc[off] += g;
        for d in (0..rank).rev() {
            index[d] += 1;
            off += eff[d];
            if index[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * out_shape[d];
            index[d] = 0;
        }
    }
    acc
}

/// Expands `src` (shaped `in_shape`) to `out_shape` by repeating extent-1 axes.
pub fn broadcast(src: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let n_out: usize = out_shape.iter().product();
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = in_shape
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(n_out);
    let mut index = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n_out {
        out.push(src[off]);
        for d in (0..rank).rev() {
            index[d] += 1;
            off += eff[d];
            if index[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * out_shape[d];
            index[d] = 0;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, false, &b, false, 0.0, &mut c);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // transposed storage of the same operands
        let mut at = vec![0.0; m * k];
        swap_axes(&a, &[m, k], 0, 1, &mut at);
        let mut bt = vec![0.0; k * n];
        swap_axes(&b, &[k, n], 0, 1, &mut bt);
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &at, true, &bt, true, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            in_channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let img: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).cos()).collect();
        let cols_y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).sin())
            .collect();
        let mut cols = vec![0.0; cols_y.len()];
        im2col(&img, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&cols_y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im(&cols_y, &g, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint() {
        let data = [1.0, 2.0, 3.0];
        let out = broadcast(&data, &[1, 3, 1], &[2, 3, 2]);
        assert_eq!(
            out,
            vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]
        );
        let red = reduce_broadcast(&out, &[2, 3, 2], &[1, 3, 1]);
        assert_eq!(red, vec![4.0, 8.0, 12.0]);
    }
}
