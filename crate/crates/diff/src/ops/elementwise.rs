use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

impl<T: Scalar> Graph<T> {
    fn unary(&mut self, op: Op<T>, x: Var, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(op, &[x], value)
    }

    fn binary(&mut self, op: Op<T>, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check_same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(op, &[a, b], value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    /// `x[B x N] + bias[N]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_row", sx, sb));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let value = Tensor::new(sx, data)?;
        Ok(self.push(Op::AddRow, &[x, bias], value))
    }

    /// `x[B x C x ...] + bias[C]` broadcast over batch and spatial axes.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias));
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_channel", &sx, sb));
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % c])
            .collect();
        let value = Tensor::new(&sx, data)?;
        Ok(self.push(Op::AddChannel, &[x, bias], value))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(Op::Scale(c), x, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(Op::AddScalar, x, |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, T::one())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, &[x], value)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(Op::Mean, &[x], value)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(Op::Elu, x, elu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh, x, |v| v.tanh())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Op::Abs, x, |v| v.abs())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp, x, |v| v.exp())
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: T) -> Var {
        self.unary(Op::LogClamp(eps), x, |v| v.max(eps).ln())
    }
}

pub(crate) fn mul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
    let da = needs[0].then(|| b.data().iter().zip(g).map(|(&b, &g)| b * g).collect());
    let db = needs[1].then(|| a.data().iter().zip(g).map(|(&a, &g)| a * g).collect());
    vec![da, db]
}

pub(crate) fn add_row_backward<T: Scalar>(bias: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    let n = bias.numel();
    let mut db = vec![T::zero(); n];
    for row in g.chunks(n) {
        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
    }
    vec![Some(g.to_vec()), Some(db)]
}

pub(crate) fn add_channel_backward<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    let c = bias.numel();
    let inner: usize = x.shape()[2..].iter().product();
    let mut db = vec![T::zero(); c];
    for (i, block) in g.chunks(inner).enumerate() {
        db[i % c] += block.iter().copied().sum::<T>();
    }
    vec![Some(g.to_vec()), Some(db)]
}

pub(crate) fn elu_backward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    let d = x
        .data()
        .iter()
        .zip(y.data())
        .zip(g)
        .map(|((&x, &y), &g)| if x > T::zero() { g } else { g * (y + T::one()) })
        .collect();
    vec![Some(d)]
}

pub(crate) fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    let d = y.data().iter().zip(g).map(|(&y, &g)| g * y * (T::one() - y)).collect();
    vec![Some(d)]
}

pub(crate) fn tanh_backward<T: Scalar>(y: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    let d = y.data().iter().zip(g).map(|(&y, &g)| g * (T::one() - y * y)).collect();
    vec![Some(d)]
}

pub(crate) fn abs_backward<T: Scalar>(x: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    let d = x
        .data()
        .iter()
        .zip(g)
        .map(|(&x, &g)| {
            if x > T::zero() {
                g
            } else if x < T::zero() {
                -g
            } else {
                T::zero()
            }
        })
        .collect();
    vec![Some(d)]
}

pub(crate) fn log_clamp_backward<T: Scalar>(x: &Tensor<T>, eps: T, g: &[T]) -> Vec<Option<Vec<T>>> {
    let d = x
        .data()
        .iter()
        .zip(g)
        .map(|(&x, &g)| if x > eps { g / x } else { T::zero() })
        .collect();
    vec![Some(d)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_closed_forms() {
        assert_eq!(elu(0.0f64), 0.0);
        assert_eq!(elu(3.0f64), 3.0);
        assert!((elu(-1.0f64) - (-0.632_120_558_8)).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        // Naive 1/(1+exp(-x)) in double precision is the oracle here.
        let naive = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((sigmoid(40.0f64) - 1.0).abs() <= 1e-12);
        assert!(sigmoid(-40.0f64).abs() <= 1e-12);
        assert!((sigmoid(40.0f64) - naive(40.0)).abs() <= 1e-15);
        assert!((sigmoid(-40.0f64) - naive(-40.0)).abs() <= 1e-15);
        assert!(sigmoid(-800.0f64).is_finite() && sigmoid(800.0f64).is_finite());
        assert!(sigmoid(-100.0f32).is_finite());
    }

    #[test]
    fn tanh_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.tanh(x);
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }
}
