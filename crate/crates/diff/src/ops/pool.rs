use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::ops::conv::{ConvGeom, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Marks a window with no in-bounds tap.
const PAD: usize = usize::MAX;

impl<T: Scalar> Graph<T> {
    /// Window maxima over `[B x C x H x W]`. Padded taps are skipped, so
    /// "same" padding only changes the output size; ties go to the first
    /// tap in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, padding: Padding) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("maxpool2d", &s, &[]));
        }
        let geom = ConvGeom::new("maxpool2d", s[2], s[3], k, stride, padding)?;
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let (oh, ow) = (geom.dst_h, geom.dst_w);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (T::neg_infinity(), PAD);
                    for ki in 0..k {
                        for kj in 0..k {
                            let y = (oy * stride + ki) as isize - geom.pad_top as isize;
                            let xx = (ox * stride + kj) as isize - geom.pad_left as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let i = y as usize * w + xx as usize;
                            if best.1 == PAD || plane[i] > best.0 {
                                best = (plane[i], p * h * w + i);
                            }
                        }
                    }
                    out.push(best.0);
                    argmax.push(best.1);
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        Ok(self.push(Op::MaxPool { argmax }, &[x], value))
    }

    /// Non-overlapping `k x k` mean pooling; `k` must divide both sides.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(Error::param("avgpool2d", format!("factor {k} does not tile {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let norm = T::from_usize(k * k).unwrap();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        for (p, plane) in src.chunks(h * w).enumerate() {
            for y in 0..h {
                for xx in 0..w {
                    out[p * oh * ow + (y / k) * ow + xx / k] += plane[y * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= norm);
        let value = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        Ok(self.push(Op::AvgPool { k }, &[x], value))
    }
}

pub(crate) fn maxpool_backward<T: Scalar>(x: &Tensor<T>, argmax: &[usize], g: &[T]) -> Vec<Option<Vec<T>>> {
    let mut d = vec![T::zero(); x.numel()];
    for (&i, &gv) in argmax.iter().zip(g) {
        if i != PAD {
            d[i] += gv;
        }
    }
    vec![Some(d)]
}

pub(crate) fn avgpool_backward<T: Scalar>(x: &Tensor<T>, k: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    let norm = T::from_usize(k * k).unwrap();
    let mut d = vec![T::zero(); x.numel()];
    for (p, plane) in d.chunks_mut(h * w).enumerate() {
        for y in 0..h {
            for xx in 0..w {
                plane[y * w + xx] = g[p * oh * ow + (y / k) * ow + xx / k] / norm;
            }
        }
    }
    vec![Some(d)]
}
