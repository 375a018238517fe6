//! Raw numeric kernels over flat row-major buffers.

use super::Real;
use crate::error::{Error, Result};

/// `c (m x n) = op(a) * op(b)` (+ `c` when `accumulate`).
///
/// `a` is stored `m x k` row-major, or `k x m` when `ta`; `b` is stored
/// `k x n`, or `n x k` when `tb`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths were checked above and the strides address exactly
    // those row-major layouts; `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// Output length of a strided window sweep, `floor((len + 2*pad - k)/stride) + 1`.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || len + 2 * pad < kernel {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

/// Geometry of a 2-D cross-correlation from an `input` map to an `output`
/// map. The transposed convolution and the weight gradient reuse the same
/// geometry with the roles of the two maps swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of `conv(x, w)` for `x: [n, ci, h, w]`, `w: [co, ci, kh, kw]`.
    pub fn for_conv(
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let op = "conv2d";
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::InvalidGeometry {
                op,
                reason: format!("expected 4-d input and kernel, got {x:?} and {w:?}"),
            });
        }
        if x[1] != w[1] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let out_h = conv_output_len(x[2], w[2], stride, pad);
        let out_w = conv_output_len(x[3], w[3], stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::InvalidGeometry {
                op,
                reason: format!(
                    "input {}x{} (pad {pad}) smaller than kernel {}x{} or stride {stride} invalid",
                    x[2], x[3], w[2], w[3]
                ),
            });
        };
        Ok(ConvGeometry {
            batch: x[0],
            in_channels: x[1],
            in_h: x[2],
            in_w: x[3],
            out_channels: w[0],
            kernel_h: w[2],
            kernel_w: w[3],
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Geometry of the transposed convolution of `y: [n, co, h, w]` with a
    /// kernel stored as `[co, ci, kh, kw]`; the produced map is the conv input.
    pub fn for_transpose(
        y: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let op = "transconv2d";
        if y.len() != 4 || w.len() != 4 {
            return Err(Error::InvalidGeometry {
                op,
                reason: format!("expected 4-d input and kernel, got {y:?} and {w:?}"),
            });
        }
        if y[1] != w[0] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: y.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidGeometry {
                op,
                reason: "stride must be positive".into(),
            });
        }
        let span = |len: usize, k: usize| ((len - 1) * stride + k).checked_sub(2 * pad);
        let (Some(in_h), Some(in_w)) = (span(y[2], w[2]), span(y[3], w[3])) else {
            return Err(Error::InvalidGeometry {
                op,
                reason: format!("padding {pad} too large for a {}x{} input", y[2], y[3]),
            });
        };
        if in_h == 0 || in_w == 0 {
            return Err(Error::InvalidGeometry {
                op,
                reason: format!("empty output for a {}x{} input", y[2], y[3]),
            });
        }
        Ok(ConvGeometry {
            batch: y[0],
            in_channels: w[1],
            in_h,
            in_w,
            out_channels: w[0],
            kernel_h: w[2],
            kernel_w: w[3],
            stride,
            pad,
            out_h: y[2],
            out_w: y[3],
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    /// Visit every (patch row, output position, input offset) triple that
    /// lands inside the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.in_h {
                            continue;
                        }
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj as usize >= self.in_w {
                                continue;
                            }
                            let src = (c * self.in_h + ii as usize) * self.in_w + jj as usize;
                            f(row * plane, oi * self.out_w + oj, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        col.fill(T::zero());
        self.for_each_tap(|row, pos, src| col[row + pos] = x[src]);
    }

    fn col2im<T: Real>(&self, col: &[T], x: &mut [T]) {
        self.for_each_tap(|row, pos, src| x[src] = x[src] + col[row + pos]);
    }

    /// Cross-correlation: `x` shaped like the input, `w` like the kernel.
    pub fn conv<T: Real>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (k, plane, inp) = (self.patch_len(), self.out_plane(), self.in_plane());
        let per_out = self.out_channels * plane;
        let mut out = vec![T::zero(); self.batch * per_out];
        let mut col = vec![T::zero(); k * plane];
        for n in 0..self.batch {
            self.im2col(&x[n * inp..(n + 1) * inp], &mut col);
            gemm(
                self.out_channels,
                k,
                plane,
                w,
                false,
                &col,
                false,
                &mut out[n * per_out..(n + 1) * per_out],
                false,
            );
        }
        out
    }

    /// Adjoint of [`conv`](Self::conv) in its first argument: `y` shaped
    /// like the output, result shaped like the input.
    pub fn conv_transpose<T: Real>(&self, y: &[T], w: &[T]) -> Vec<T> {
        let (k, plane, inp) = (self.patch_len(), self.out_plane(), self.in_plane());
        let per_out = self.out_channels * plane;
        let mut out = vec![T::zero(); self.batch * inp];
        let mut col = vec![T::zero(); k * plane];
        for n in 0..self.batch {
            gemm(
                k,
                self.out_channels,
                plane,
                w,
                true,
                &y[n * per_out..(n + 1) * per_out],
                false,
                &mut col,
                false,
            );
            self.col2im(&col, &mut out[n * inp..(n + 1) * inp]);
        }
        out
    }

    /// Gradient of `<conv(x, w), y>` with respect to `w`.
    pub fn conv_weight<T: Real>(&self, x: &[T], y: &[T]) -> Vec<T> {
        let (k, plane, inp) = (self.patch_len(), self.out_plane(), self.in_plane());
        let per_out = self.out_channels * plane;
        let mut out = vec![T::zero(); self.out_channels * k];
        let mut col = vec![T::zero(); k * plane];
        for n in 0..self.batch {
            self.im2col(&x[n * inp..(n + 1) * inp], &mut col);
            gemm(
                self.out_channels,
                plane,
                k,
                &y[n * per_out..(n + 1) * per_out],
                false,
                &col,
                true,
                &mut out,
                true,
            );
        }
        out
    }
}

/// Max-pooling window geometry over `[n, c, h, w]` maps (no padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn output_shape(&self, x: &[usize]) -> Result<Vec<usize>> {
        let bad = |reason: String| Error::InvalidGeometry {
            op: "maxpool2d",
            reason,
        };
        if x.len() != 4 {
            return Err(bad(format!("expected a 4-d input, got {x:?}")));
        }
        let h = conv_output_len(x[2], self.kernel, self.stride, 0);
        let w = conv_output_len(x[3], self.kernel, self.stride, 0);
        match (h, w) {
            (Some(h), Some(w)) => Ok(vec![x[0], x[1], h, w]),
            _ => Err(bad(format!(
                "{}x{} input smaller than {}x{} window",
                x[2], x[3], self.kernel, self.kernel
            ))),
        }
    }

    /// Flat input index of each window maximum. Ties go to the first
    /// position in row-major order.
    pub fn argmax<T: Real>(&self, x: &[T], shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let out_shape = self.output_shape(shape)?;
        let (h, w) = (shape[2], shape[3]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let mut idx = Vec::with_capacity(super::numel(&out_shape));
        for plane in 0..shape[0] * shape[1] {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + oi * self.stride * w + oj * self.stride;
                    for ki in 0..self.kernel {
                        for kj in 0..self.kernel {
                            let at = base + (oi * self.stride + ki) * w + oj * self.stride + kj;
                            if x[at] > x[best] {
                                best = at;
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
        Ok((idx, out_shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut d = [0.0f64; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut d, false);
        assert_eq!(c, d);
    }

    #[test]
    fn output_lengths() {
        assert_eq!(conv_output_len(28, 3, 1, 1), Some(28));
        assert_eq!(conv_output_len(28, 2, 2, 0), Some(14));
        assert_eq!(conv_output_len(2, 3, 1, 0), None);
        assert_eq!(conv_output_len(5, 3, 0, 0), None);
    }

    #[test]
    fn transpose_chain_matches_generator_table() {
        let mut h = 1;
        let mut seen = vec![h];
        for (k, s) in [(2, 1), (4, 2), (3, 2), (4, 2)] {
            let g = ConvGeometry::for_transpose(&[1, 1, h, h], &[1, 1, k, k], s, 0).unwrap();
            h = g.in_h;
            seen.push(h);
        }
        assert_eq!(seen, [1, 2, 6, 13, 28]);
    }

    #[test]
    fn argmax_breaks_ties_to_first() {
        let x = [1.0f64, 1.0, 1.0, 1.0];
        let (idx, shape) = PoolGeometry { kernel: 2, stride: 2 }
            .argmax(&x, &[1, 1, 2, 2])
            .unwrap();
        assert_eq!(shape, [1, 1, 1, 1]);
        assert_eq!(idx, [0]);
    }

    #[test]
    fn rejects_kernel_larger_than_input() {
        let err = ConvGeometry::for_conv(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).unwrap_err();
        assert!(err.to_string().contains("smaller than kernel"), "{err}");
    }
}
