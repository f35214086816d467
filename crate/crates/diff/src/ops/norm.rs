use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running per-channel mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    fn update(&mut self, mean: &[T], var_unbiased: &[T]) {
        let keep = T::lit(BN_MOMENTUM);
        let take = T::one() - keep;
        for (r, &m) in self.mean.iter_mut().zip(mean) {
            *r = keep * *r + take * m;
        }
        for (r, &v) in self.var.iter_mut().zip(var_unbiased) {
            *r = keep * *r + take * v;
        }
    }
}

/// Channel layout of a `[B x C]` or `[B x C x H x W]` tensor.
fn layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1], 1)),
        4 => Some((shape[0], shape[1], shape[2] * shape[3])),
        _ => None,
    }
}

impl<T: Scalar> Graph<T> {
    /// Per-channel standardization followed by `gamma * x + beta`.
    ///
    /// In [`Mode::Train`] batch statistics are used and `stats` is updated;
    /// in [`Mode::Infer`] the running statistics are used as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        stats: &mut RunningStats<T>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((b, c, inner)) = layout(&shape) else {
            return Err(Error::shape("batchnorm", &shape, &[]));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(Error::shape("batchnorm", &shape, self.shape(gamma)));
        }
        let eps = T::lit(BN_EPS);
        let src = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::Config(
                        "batch norm in train mode needs a batch of at least 2".into(),
                    ));
                }
                let m = T::from_usize(b * inner).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (i, block) in src.chunks(inner).enumerate() {
                    mean[i % c] += block.iter().copied().sum::<T>();
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for (i, block) in src.chunks(inner).enumerate() {
                    let mu = mean[i % c];
                    var[i % c] += block.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
                var.iter_mut().for_each(|v| *v /= m);
                let unbiased: Vec<T> = var.iter().map(|&v| v * m / (m - T::one())).collect();
                stats.update(&mean, &unbiased);
                (mean, var)
            }
            Mode::Infer => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for (i, block) in src.chunks(inner).enumerate() {
            let ch = i % c;
            for &v in block {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gm[ch] * h + bt[ch]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        let op = Op::BatchNorm {
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        Ok(self.push(op, &[x, gamma, beta], value))
    }
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let (b, c, inner) = layout(x.shape()).expect("validated in forward");
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (i, (gb, hb)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
        let ch = i % c;
        for (&gv, &h) in gb.iter().zip(hb) {
            sum_g[ch] += gv;
            sum_gx[ch] += gv * h;
        }
    }
    let gm = gamma.data();
    let dx = needs[0].then(|| {
        let m = T::from_usize(b * inner).unwrap();
        let mut dx = Vec::with_capacity(g.len());
        for (i, (gb, hb)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
            let ch = i % c;
            let k = gm[ch] * inv_std[ch];
            for (&gv, &h) in gb.iter().zip(hb) {
                dx.push(if train {
                    k / m * (m * gv - sum_g[ch] - h * sum_gx[ch])
                } else {
                    k * gv
                });
            }
        }
        dx
    });
    vec![dx, Some(sum_gx), Some(sum_g)]
}
