use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Splits a shape around axis 1 into (outer, width, inner).
fn axis1(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape, &[x], value))
    }

    /// `[B x ...] -> [B x prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = *s.first().ok_or_else(|| Error::Usage("flatten of a scalar".into()))?;
        let rest = s[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    /// Concatenation along axis 1 (features or channels).
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .shape(
                *xs.first()
                    .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?,
            )
            .to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat", &first, &[]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[1];
        }
        let (outer, _, inner) = axis1(&first);
        let mut data = Vec::with_capacity(outer * total * inner);
        for b in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let block = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(Op::Concat, xs, value))
    }

    /// `x[:, start..start+len, ...]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || len == 0 || start + len > s[1] {
            return Err(Error::param(
                "slice",
                format!("range {start}..{} on axis 1 of {s:?}", start + len),
            ));
        }
        let (outer, width, inner) = axis1(&s);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for b in 0..outer {
            let base = (b * width + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(Op::Slice { start }, &[x], value))
    }

    /// Spatial crop of a `[B x C x H x W]` tensor.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || top + h > s[2] || left + w > s[3] || h == 0 || w == 0 {
            return Err(Error::param("crop", format!("{h}x{w} at ({top},{left}) from {s:?}")));
        }
        let src = self.value(x).data();
        let (sh, sw) = (s[2], s[3]);
        let mut data = Vec::with_capacity(s[0] * s[1] * h * w);
        for plane in src.chunks(sh * sw) {
            for r in top..top + h {
                data.extend_from_slice(&plane[r * sw + left..r * sw + left + w]);
            }
        }
        let value = Tensor::new(&[s[0], s[1], h, w], data)?;
        Ok(self.push(Op::Crop { top, left }, &[x], value))
    }
}

pub(crate) fn concat_backward<T: Scalar>(shapes: &[&[usize]], g: &[T]) -> Vec<Option<Vec<T>>> {
    let outer = shapes[0][0];
    let inner: usize = shapes[0][2..].iter().product();
    let total: usize = shapes.iter().map(|s| s[1]).sum();
    let mut out: Vec<Vec<T>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(outer * s[1] * inner))
        .collect();
    for b in 0..outer {
        let mut offset = b * total * inner;
        for (k, s) in shapes.iter().enumerate() {
            let block = s[1] * inner;
            out[k].extend_from_slice(&g[offset..offset + block]);
            offset += block;
        }
    }
    out.into_iter().map(Some).collect()
}

pub(crate) fn slice_backward<T: Scalar>(x: &Tensor<T>, out: &Tensor<T>, start: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
    let (outer, width, inner) = axis1(x.shape());
    let len = out.shape()[1];
    let mut d = vec![T::zero(); x.numel()];
    for b in 0..outer {
        let dst = (b * width + start) * inner;
        let src = b * len * inner;
        d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
    }
    vec![Some(d)]
}

pub(crate) fn crop_backward<T: Scalar>(
    x: &Tensor<T>,
    out: &Tensor<T>,
    top: usize,
    left: usize,
    g: &[T],
) -> Vec<Option<Vec<T>>> {
    let (sh, sw) = (x.shape()[2], x.shape()[3]);
    let (h, w) = (out.shape()[2], out.shape()[3]);
    let mut d = vec![T::zero(); x.numel()];
    for (plane, gp) in d.chunks_mut(sh * sw).zip(g.chunks(h * w)) {
        for r in 0..h {
            let dst = (top + r) * sw + left;
            plane[dst..dst + w].copy_from_slice(&gp[r * w..(r + 1) * w]);
        }
    }
    vec![Some(d)]
}
