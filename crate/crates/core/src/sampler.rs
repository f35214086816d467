//! Isotropic affine grids and differentiable bilinear sampling.
//!
//! Normalized coordinates span `[-1, 1]` on both axes; `x` is the column
//! axis and `y` the row axis. A grid maps every target cell `(xt, yt)` to
//! the source location `(s * xt + tx, s * yt + ty)`.

use cram_diff::{CustomOp, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Smallest reachable zoom factor after squashing.
pub const S_MIN: f64 = 0.05;

/// Scale and translation of one glimpse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        s: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(s: f64, tx: f64, ty: f64) -> Self {
        AffineParams { s, tx, ty }
    }

    /// Maps unconstrained outputs onto `s in [S_MIN, 1)`, `tx, ty in (-1, 1)`.
    pub fn squash(a: f64, b: f64, c: f64) -> Self {
        AffineParams {
            s: cram_diff::sigmoid(a) * (1.0 - S_MIN) + S_MIN,
            tx: b.tanh(),
            ty: c.tanh(),
        }
    }

    pub fn from_slice<T: Scalar>(v: &[T]) -> Self {
        AffineParams {
            s: v[0].to_f64().unwrap_or(f64::NAN),
            tx: v[1].to_f64().unwrap_or(f64::NAN),
            ty: v[2].to_f64().unwrap_or(f64::NAN),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.s, self.tx, self.ty]
    }

    /// Homogeneous transform from target to source coordinates.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.s, 0.0, self.tx], [0.0, self.s, self.ty], [0.0, 0.0, 1.0]]
    }

    pub fn is_valid(&self) -> bool {
        self.s > 0.0 && self.s <= 1.0 && (-1.0..=1.0).contains(&self.tx) && (-1.0..=1.0).contains(&self.ty)
    }

    /// Source location of a normalized target point.
    pub fn apply(&self, xt: f64, yt: f64) -> (f64, f64) {
        (self.s * xt + self.tx, self.s * yt + self.ty)
    }
}

/// One resampled view of an image.
#[derive(Clone, Debug)]
pub struct GlimpsePatch<T> {
    /// `[C x Hg x Wg]`
    pub pixels: Tensor<T>,
    pub step_index: usize,
    pub tau: AffineParams,
}

/// Normalized coordinate of cell `i` on a uniform grid of `n` cells.
pub fn target_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Pixel coordinate of a normalized coordinate along an axis of `n` pixels.
pub fn to_pixel(v: f64, n: usize) -> f64 {
    (v + 1.0) * (n - 1) as f64 / 2.0
}

/// Source coordinates `[h x w x 2]` (x then y) for one transform.
pub fn make_grid<T: Scalar>(tau: AffineParams, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let t = Tensor::new(&[1, 3], vec![T::lit(tau.s), T::lit(tau.tx), T::lit(tau.ty)])?;
    let grid = grid_forward(&t, out_h, out_w)?;
    Ok(grid.reshape(&[out_h, out_w, 2])?)
}

/// Samples `image[C x H x W]` at `grid[h x w x 2]`; returns `[C x h x w]`.
pub fn bilinear_sample<T: Scalar>(image: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (is, gs) = (image.shape(), grid.shape());
    if is.len() != 3 || gs.len() != 3 || gs[2] != 2 {
        return Err(cram_diff::Error::shape("bilinear_sample", is, gs).into());
    }
    let image = image.reshape(&[1, is[0], is[1], is[2]])?;
    let grid = grid.reshape(&[1, gs[0], gs[1], 2])?;
    let out = sample_forward(&image, &grid)?;
    Ok(out.reshape(&[is[0], gs[0], gs[1]])?)
}

/// Resamples `image[C x H x W]` through `tau` at `size`; `step_index` is
/// the 1-based glimpse number.
pub fn extract_glimpse<T: Scalar>(
    image: &Tensor<T>,
    tau: AffineParams,
    step_index: usize,
    size: (usize, usize),
) -> Result<GlimpsePatch<T>> {
    if step_index == 0 {
        return Err(Error::usage("glimpse step index starts at 1"));
    }
    let grid = make_grid(tau, size.0, size.1)?;
    Ok(GlimpsePatch {
        pixels: bilinear_sample(image, &grid)?,
        step_index,
        tau,
    })
}

fn grid_forward<T: Scalar>(tau: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let ts = tau.shape();
    if ts.len() != 2 || ts[1] != 3 {
        return Err(cram_diff::Error::shape("affine_grid", ts, &[ts[0], 3]).into());
    }
    if h == 0 || w == 0 {
        return Err(Error::config("grid size must be at least 1x1"));
    }
    let b = ts[0];
    let mut out = Vec::with_capacity(b * h * w * 2);
    for t in tau.data().chunks(3) {
        let (s, tx, ty) = (t[0], t[1], t[2]);
        for i in 0..h {
            let yt = T::lit(target_coord(i, h));
            for j in 0..w {
                let xt = T::lit(target_coord(j, w));
                out.push(s * xt + tx);
                out.push(s * yt + ty);
            }
        }
    }
    Ok(Tensor::new(&[b, h, w, 2], out)?)
}

struct AffineGrid {
    h: usize,
    w: usize,
}

impl<T: Scalar> CustomOp<T> for AffineGrid {
    fn name(&self) -> &'static str {
        "affine_grid"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let b = inputs[0].shape()[0];
        let cells = self.h * self.w;
        let mut out = vec![T::zero(); b * 3];
        for n in 0..b {
            let g = &grad[n * cells * 2..(n + 1) * cells * 2];
            let (mut ds, mut dx, mut dy) = (T::zero(), T::zero(), T::zero());
            for i in 0..self.h {
                let yt = T::lit(target_coord(i, self.h));
                for j in 0..self.w {
                    let xt = T::lit(target_coord(j, self.w));
                    let k = (i * self.w + j) * 2;
                    ds += g[k] * xt + g[k + 1] * yt;
                    dx += g[k];
                    dy += g[k + 1];
                }
            }
            out[n * 3] = ds;
            out[n * 3 + 1] = dx;
            out[n * 3 + 2] = dy;
        }
        vec![Some(out)]
    }
}

/// The four taps around one sample point; `None` when a tap is off-image.
struct Taps<T> {
    idx: [Option<usize>; 4],
    fx: T,
    fy: T,
}

fn taps<T: Scalar>(xs: T, ys: T, hh: usize, ww: usize) -> Option<Taps<T>> {
    let px = (xs + T::one()) * T::lit((ww - 1) as f64 / 2.0);
    let py = (ys + T::one()) * T::lit((hh - 1) as f64 / 2.0);
    let (x0f, y0f) = (px.floor(), py.floor());
    let (x0, y0) = (x0f.to_f64()?, y0f.to_f64()?);
    // Anything at least one pixel outside the image only meets padding.
    if !(x0 >= -1.0 && x0 < ww as f64 && y0 >= -1.0 && y0 < hh as f64) {
        return None;
    }
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |y: i64, x: i64| {
        (y >= 0 && x >= 0 && (y as usize) < hh && (x as usize) < ww).then(|| y as usize * ww + x as usize)
    };
    Some(Taps {
        idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
        fx: px - x0f,
        fy: py - y0f,
    })
}

fn sample_forward<T: Scalar>(image: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (is, gs) = (image.shape(), grid.shape());
    if is.len() != 4 || gs.len() != 4 || gs[3] != 2 || gs[0] != is[0] {
        return Err(cram_diff::Error::shape("bilinear_sample", is, gs).into());
    }
    let (b, c, hh, ww) = (is[0], is[1], is[2], is[3]);
    let (h, w) = (gs[1], gs[2]);
    let cells = h * w;
    let mut out = vec![T::zero(); b * c * cells];
    let img = image.data();
    for n in 0..b {
        for p in 0..cells {
            let k = (n * cells + p) * 2;
            let Some(t) = taps(grid.data()[k], grid.data()[k + 1], hh, ww) else {
                continue;
            };
            let one = T::one();
            let wts = [
                (one - t.fx) * (one - t.fy),
                t.fx * (one - t.fy),
                (one - t.fx) * t.fy,
                t.fx * t.fy,
            ];
            for ch in 0..c {
                let plane = &img[(n * c + ch) * hh * ww..(n * c + ch + 1) * hh * ww];
                let mut v = T::zero();
                for (idx, &wt) in t.idx.iter().zip(&wts) {
                    if let Some(i) = idx {
                        v += wt * plane[*i];
                    }
                }
                out[(n * c + ch) * cells + p] = v;
            }
        }
    }
    Ok(Tensor::new(&[b, c, h, w], out)?)
}

struct Bilinear;

impl<T: Scalar> CustomOp<T> for Bilinear {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn branches(&self, inputs: &[&Tensor<T>]) -> Vec<i64> {
        let (hh, ww) = (inputs[0].shape()[2], inputs[0].shape()[3]);
        let sx = T::lit((ww - 1) as f64 / 2.0);
        let sy = T::lit((hh - 1) as f64 / 2.0);
        let cell = |v: T, s: T| match ((v + T::one()) * s).floor().to_f64() {
            Some(p) if p.is_finite() => p.clamp(-2.0, 1e9) as i64,
            _ => i64::MIN,
        };
        inputs[1]
            .data()
            .chunks(2)
            .flat_map(|xy| [cell(xy[0], sx), cell(xy[1], sy)])
            .collect()
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (image, grid) = (inputs[0], inputs[1]);
        let is = image.shape();
        let (b, c, hh, ww) = (is[0], is[1], is[2], is[3]);
        let cells = grid.shape()[1] * grid.shape()[2];
        let img = image.data();
        let mut d_img = needs[0].then(|| vec![T::zero(); image.numel()]);
        let mut d_grid = needs[1].then(|| vec![T::zero(); grid.numel()]);
        let sx = T::lit((ww - 1) as f64 / 2.0);
        let sy = T::lit((hh - 1) as f64 / 2.0);
        let one = T::one();
        for n in 0..b {
            for p in 0..cells {
                let k = (n * cells + p) * 2;
                let Some(t) = taps(grid.data()[k], grid.data()[k + 1], hh, ww) else {
                    continue;
                };
                let wts = [
                    (one - t.fx) * (one - t.fy),
                    t.fx * (one - t.fy),
                    (one - t.fx) * t.fy,
                    t.fx * t.fy,
                ];
                let (mut gx, mut gy) = (T::zero(), T::zero());
                for ch in 0..c {
                    let base = (n * c + ch) * hh * ww;
                    let g = grad[(n * c + ch) * cells + p];
                    let v = t.idx.map(|i| i.map_or(T::zero(), |i| img[base + i]));
                    gx += g * ((one - t.fy) * (v[1] - v[0]) + t.fy * (v[3] - v[2]));
                    gy += g * ((one - t.fx) * (v[2] - v[0]) + t.fx * (v[3] - v[1]));
                    if let Some(d) = d_img.as_mut() {
                        for (idx, &wt) in t.idx.iter().zip(&wts) {
                            if let Some(i) = idx {
                                d[base + i] += wt * g;
                            }
                        }
                    }
                }
                if let Some(d) = d_grid.as_mut() {
                    d[k] = gx * sx;
                    d[k + 1] = gy * sy;
                }
            }
        }
        vec![d_img, d_grid]
    }
}

/// Sampler operations recorded on a [`Graph`].
pub trait SamplerGraph<T: Scalar> {
    /// Raw localization outputs `[B x 3]` to constrained `(s, tx, ty)`.
    fn squash_tau(&mut self, raw: Var) -> Result<Var>;
    /// `tau[B x 3]` to source coordinates `[B x h x w x 2]`.
    fn affine_grid(&mut self, tau: Var, h: usize, w: usize) -> Result<Var>;
    /// `image[B x C x H x W]` sampled at `grid[B x h x w x 2]`.
    fn bilinear_sample(&mut self, image: Var, grid: Var) -> Result<Var>;
    /// Grid generation and sampling in one call; returns `[B x C x h x w]`.
    fn glimpse(&mut self, image: Var, tau: Var, size: (usize, usize)) -> Result<Var>;
}

impl<T: Scalar> SamplerGraph<T> for Graph<T> {
    fn squash_tau(&mut self, raw: Var) -> Result<Var> {
        let a = self.slice(raw, 0, 1)?;
        let s = self.sigmoid(a);
        let s = self.scale(s, T::lit(1.0 - S_MIN));
        let s = self.add_scalar(s, T::lit(S_MIN));
        let bc = self.slice(raw, 1, 2)?;
        let t = self.tanh(bc);
        Ok(self.concat(&[s, t])?)
    }

    fn affine_grid(&mut self, tau: Var, h: usize, w: usize) -> Result<Var> {
        let value = grid_forward(self.value(tau), h, w)?;
        Ok(self.custom(Box::new(AffineGrid { h, w }), &[tau], value))
    }

    fn bilinear_sample(&mut self, image: Var, grid: Var) -> Result<Var> {
        let value = sample_forward(self.value(image), self.value(grid))?;
        Ok(self.custom(Box::new(Bilinear), &[image, grid], value))
    }

    fn glimpse(&mut self, image: Var, tau: Var, size: (usize, usize)) -> Result<Var> {
        let grid = self.affine_grid(tau, size.0, size.1)?;
        self.bilinear_sample(image, grid)
    }
}
