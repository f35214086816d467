use cram_diff::{ParamStore, Scalar, Tensor};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 1e-4;

/// Bias-corrected Adam over every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the stored gradients. A non-finite gradient
    /// aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite {
                group: p.name.clone(),
                step: self.step,
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let one = T::one();
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let mut m = std::mem::replace(&mut self.m[i], Tensor::scalar(T::zero())).into_data();
            let mut v = std::mem::replace(&mut self.v[i], Tensor::scalar(T::zero())).into_data();
            let mut w = p.value.data().to_vec();
            for (k, &g) in p.grad.data().iter().enumerate() {
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= lr * mh / (vh.sqrt() + eps);
            }
            let shape = p.value.shape().to_vec();
            self.m[i] = Tensor::new(&shape, m)?;
            self.v[i] = Tensor::new(&shape, v)?;
            p.value = Tensor::new(&shape, w)?;
        }
        Ok(())
    }
}
