use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::ops::linalg::{gemm, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that the output is `ceil(H / stride)`; any odd
    /// remainder goes to the bottom/right edge.
    Same,
    Valid,
}

/// Geometry of a strided square-kernel correlation from a `src` plane to a
/// `dst` plane. Transposed convolution reuses it with the roles swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
}

impl ConvGeom {
    pub fn new(op: &'static str, h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride < 1 {
            return Err(Error::param(op, "stride must be at least 1"));
        }
        if k < 1 {
            return Err(Error::param(op, "kernel size must be at least 1"));
        }
        let (dst_h, pad_top) = Self::axis(op, h, k, stride, padding)?;
        let (dst_w, pad_left) = Self::axis(op, w, k, stride, padding)?;
        Ok(ConvGeom {
            k,
            stride,
            pad_top,
            pad_left,
            src_h: h,
            src_w: w,
            dst_h,
            dst_w,
        })
    }

    fn axis(op: &'static str, n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
        match padding {
            Padding::Same => {
                let out = n.div_ceil(stride);
                let total = ((out - 1) * stride + k).saturating_sub(n);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if k > n {
                    return Err(Error::param(
                        op,
                        format!("kernel {k} larger than input {n} without padding"),
                    ));
                }
                Ok(((n - k) / stride + 1, 0))
            }
        }
    }

    pub(crate) fn col_rows(&self, channels: usize) -> usize {
        channels * self.k * self.k
    }

    pub(crate) fn col_cols(&self) -> usize {
        self.dst_h * self.dst_w
    }
}

/// Unfolds one `C x src_h x src_w` image into a `(C*k*k) x (dst_h*dst_w)`
/// patch matrix; out-of-bounds taps read as zero.
pub(crate) fn im2col<T: Scalar>(src: &[T], channels: usize, g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    debug_assert_eq!(col.len(), g.col_rows(channels) * cols);
    for ch in 0..channels {
        let plane = &src[ch * g.src_h * g.src_w..(ch + 1) * g.src_h * g.src_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let out = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.dst_h {
                    let y = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    let line = &mut out[oy * g.dst_w..(oy + 1) * g.dst_w];
                    if y < 0 || y >= g.src_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[y as usize * g.src_w..(y as usize + 1) * g.src_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        *v = if x < 0 || x >= g.src_w as isize {
                            T::zero()
                        } else {
                            src_row[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds patch columns back onto the plane.
pub(crate) fn col2im<T: Scalar>(col: &[T], channels: usize, g: &ConvGeom, dst: &mut [T]) {
    let cols = g.col_cols();
    for ch in 0..channels {
        let plane = &mut dst[ch * g.src_h * g.src_w..(ch + 1) * g.src_h * g.src_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.dst_h {
                    let y = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    if y < 0 || y >= g.src_h as isize {
                        continue;
                    }
                    let base = y as usize * g.src_w;
                    for ox in 0..g.dst_w {
                        let x = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        if x >= 0 && x < g.src_w as isize {
                            plane[base + x as usize] += src[oy * g.dst_w + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `input[B x C x H x W]` with `kernel[F x C x k x k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sk[1] != sx[1] || sk[2] != sk[3] {
            return Err(Error::shape("conv2d", &sx, &sk));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let f = sk[0];
        let geom = ConvGeom::new("conv2d", h, w, sk[2], stride, padding)?;
        let (rows, cols) = (geom.col_rows(c), geom.col_cols());
        let mut col = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); b * f * cols];
        let x = self.value(input).data();
        let wm = MatRef::new(self.value(kernel).data(), f, rows);
        for (bi, out_b) in out.chunks_mut(f * cols).enumerate() {
            im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], c, &geom, &mut col);
            gemm(wm, MatRef::new(&col, rows, cols), out_b, false);
        }
        let value = Tensor::new(&[b, f, geom.dst_h, geom.dst_w], out)?;
        Ok(self.push(Op::Conv2d(geom), &[input, kernel], value))
    }

    /// Fractionally strided convolution of `input[B x Cin x H x W]` with
    /// `kernel[Cin x Cout x k x k]`; the output side is
    /// `(H - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sk[0] != sx[1] || sk[2] != sk[3] {
            return Err(Error::shape("conv_transpose2d", &sx, &sk));
        }
        if stride < 1 {
            return Err(Error::param("conv_transpose2d", "stride must be at least 1"));
        }
        let (b, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sk[1], sk[2]);
        let side = |n: usize| ((n - 1) * stride + k + output_pad).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (side(h), side(w)) else {
            return Err(Error::param("conv_transpose2d", "padding exceeds output size"));
        };
        if (output_pad > 0 && output_pad >= stride) || oh == 0 || ow == 0 {
            return Err(Error::param(
                "conv_transpose2d",
                "output padding must be smaller than stride",
            ));
        }
        let geom = ConvGeom {
            k,
            stride,
            pad_top: pad,
            pad_left: pad,
            src_h: oh,
            src_w: ow,
            dst_h: h,
            dst_w: w,
        };
        let (rows, cols) = (geom.col_rows(cout), geom.col_cols());
        let mut col = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); b * cout * oh * ow];
        let x = self.value(input).data();
        let wm = MatRef::new(self.value(kernel).data(), cin, rows);
        for (bi, out_b) in out.chunks_mut(cout * oh * ow).enumerate() {
            let xb = MatRef::new(&x[bi * cin * cols..(bi + 1) * cin * cols], cin, cols);
            gemm(wm.t(), xb, &mut col, false);
            col2im(&col, cout, &geom, out_b);
        }
        let value = Tensor::new(&[b, cout, oh, ow], out)?;
        Ok(self.push(Op::ConvTranspose2d(geom), &[input, kernel], value))
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeom,
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let s = x.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let f = kernel.shape()[0];
    let (rows, cols) = (geom.col_rows(c), geom.col_cols());
    let wm = MatRef::new(kernel.data(), f, rows);
    let mut dx = needs[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = needs[1].then(|| vec![T::zero(); kernel.numel()]);
    let mut col = vec![T::zero(); rows * cols];
    for bi in 0..b {
        let gb = MatRef::new(&g[bi * f * cols..(bi + 1) * f * cols], f, cols);
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[bi * c * plane..(bi + 1) * c * plane], c, geom, &mut col);
            gemm(gb, MatRef::new(&col, rows, cols).t(), dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(wm.t(), gb, &mut col, false);
            col2im(&col, c, geom, &mut dx[bi * c * plane..(bi + 1) * c * plane]);
        }
    }
    vec![dx, dw]
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeom,
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let s = x.shape();
    let (b, cin) = (s[0], s[1]);
    let cout = kernel.shape()[1];
    let (rows, cols) = (geom.col_rows(cout), geom.col_cols());
    let out_plane = geom.src_h * geom.src_w;
    let wm = MatRef::new(kernel.data(), cin, rows);
    let mut dx = needs[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = needs[1].then(|| vec![T::zero(); kernel.numel()]);
    let mut dcol = vec![T::zero(); rows * cols];
    for bi in 0..b {
        im2col(
            &g[bi * cout * out_plane..(bi + 1) * cout * out_plane],
            cout,
            geom,
            &mut dcol,
        );
        let dc = MatRef::new(&dcol, rows, cols);
        if let Some(dx) = dx.as_mut() {
            gemm(wm, dc, &mut dx[bi * cin * cols..(bi + 1) * cin * cols], false);
        }
        if let Some(dw) = dw.as_mut() {
            let xb = MatRef::new(&x.data()[bi * cin * cols..(bi + 1) * cin * cols], cin, cols);
            gemm(xb, dc.t(), dw, true);
        }
    }
    vec![dx, dw]
}
