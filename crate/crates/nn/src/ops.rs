//! Low-level kernels: a checked sgemm wrapper plus im2col/col2im.

/// Strided view description for one gemm operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self {
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols,
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = a * b + beta * c`.
pub(crate) fn gemm(a: &[f32], am: Mat, b: &[f32], bm: Mat, beta: f32, c: &mut [f32], cm: Mat) {
    assert_eq!(am.cols, bm.rows, "gemm inner dimensions");
    assert_eq!(am.rows, cm.rows, "gemm output rows");
    assert_eq!(bm.cols, cm.cols, "gemm output cols");
    assert!(a.len() >= am.extent() && b.len() >= bm.extent() && c.len() >= cm.extent());
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    // SAFETY: extents checked above, and `c` does not alias `a` or `b`
    // because it is borrowed mutably.
    unsafe {
        matrixmultiply::sgemm(
            am.rows,
            am.cols,
            bm.cols,
            1.0,
            a.as_ptr(),
            am.rs as isize,
            am.cs as isize,
            b.as_ptr(),
            bm.rs as isize,
            bm.cs as isize,
            beta,
            c.as_mut_ptr(),
            cm.rs as isize,
            cm.cs as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if ph < kernel || pw < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one `(C, H, W)` image into a `(C*K*K, OH*OW)` column matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * s) as isize + ki as isize - p;
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * s) as isize + kj as isize - p;
                        *o = if iw < 0 || iw >= g.width as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a column matrix back onto a `(C, H, W)` image, accumulating overlaps.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * s) as isize + ki as isize - p;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let src_row = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    for (ow, &v) in src_row.iter().enumerate() {
                        let iw = (ow * s) as isize + kj as isize - p;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(&a, Mat::row_major(2, 3), &b, Mat::row_major(3, 4), 0.0, &mut c, Mat::row_major(2, 4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f32 = (0..3).map(|t| a[i * 3 + t] * b[t * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-5);
            }
        }
        // a^T (3x2) * c (2x4) through the transposed view
        let mut d = vec![0.0; 12];
        gemm(&a, Mat::transposed(2, 3), &c, Mat::row_major(2, 4), 0.0, &mut d, Mat::row_major(3, 4));
        for i in 0..3 {
            for j in 0..4 {
                let want: f32 = (0..2).map(|t| a[t * 3 + i] * c[t * 4 + j]).sum();
                assert!((d[i * 4 + j] - want).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for any x, y
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f32> = (0..40).map(|v| ((v * 7) % 11) as f32 - 5.0).collect();
        let y: Vec<f32> = (0..g.col_rows() * g.col_cols())
            .map(|v| ((v * 3) % 5) as f32 - 2.0)
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let lhs: f32 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f32 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
