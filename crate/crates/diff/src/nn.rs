//! Parameterized layers on top of the graph operations.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] and are
//! pulled onto a graph through a [`Bound`] view at forward time.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::lstm::LstmState;
use crate::ops::conv::Padding;
use crate::params::{Bound, ParamId, ParamStore, StatsId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform samples in `[-bound, bound]`.
pub fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}

/// Unit-variance-preserving bound for a layer with `fan_in` inputs.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            uniform(&[in_dim, out_dim], fan_in_bound(in_dim), rng),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// All-zero weights and bias; the layer outputs zeros until trained.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, x: Var) -> Result<Var> {
        let w = p.param(g, self.w);
        let b = p.param(g, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            stats: store.add_stats(format!("{name}.running"), channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, x: Var) -> Result<Var> {
        let gamma = p.param(g, self.gamma);
        let beta = p.param(g, self.beta);
        let mode = p.mode();
        g.batch_norm(x, gamma, beta, mode, p.running_stats(self.stats))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(in_ch * k * k);
        let w = store.add(format!("{name}.weight"), uniform(&[out_ch, in_ch, k, k], bound, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Conv2d { w, b, stride, padding }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, x: Var) -> Result<Var> {
        let w = p.param(g, self.w);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        match self.b {
            Some(b) => {
                let b = p.param(g, b);
                g.add_channel(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stride-2, 3x3 transposed convolution that exactly doubles the spatial
/// size (padding 1, output padding 1).
#[derive(Clone, Debug)]
pub struct UpConv {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl UpConv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // Each output pixel of a stride-2 transpose sees ~in_ch * 9 / 4 taps.
        let bound = fan_in_bound((in_ch * 9).div_ceil(4));
        let w = store.add(format!("{name}.weight"), uniform(&[in_ch, out_ch, 3, 3], bound, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        UpConv { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, x: Var) -> Result<Var> {
        let w = p.param(g, self.w);
        let y = g.conv_transpose2d(x, w, 2, 1, 1)?;
        match self.b {
            Some(b) => {
                let b = p.param(g, b);
                g.add_channel(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Affine layer, optional batch norm, ELU.
#[derive(Clone, Debug)]
pub struct Dense {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        Dense {
            linear: Linear::new(store, name, in_dim, out_dim, rng),
            norm: batch_norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), out_dim)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, x: Var) -> Result<Var> {
        let mut y = self.linear.forward(g, p, x)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(g, p, y)?;
        }
        Ok(g.elu(y))
    }
}

/// Convolution, optional batch norm, ELU. The convolution carries a bias
/// only when batch norm is off.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm>,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, name, in_ch, out_ch, k, stride, Padding::Same, !batch_norm, rng),
            norm: batch_norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), out_ch)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(g, p, x)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(g, p, y)?;
        }
        Ok(g.elu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    /// Uniform weights in `±1/sqrt(hidden)`, forget-gate bias +1.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_x = store.add(format!("{name}.w_x"), uniform(&[in_dim, 4 * hidden], bound, rng));
        let w_h = store.add(format!("{name}.w_h"), uniform(&[hidden, 4 * hidden], bound, rng));
        let bias = Tensor::from_fn(&[4 * hidden], |i| {
            if (hidden..2 * hidden).contains(&i) {
                T::one()
            } else {
                T::zero()
            }
        });
        let b = store.add(format!("{name}.bias"), bias);
        Lstm { w_x, w_h, b, hidden }
    }

    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, x: Var, state: LstmState) -> Result<LstmState> {
        let w_x = p.param(g, self.w_x);
        let w_h = p.param(g, self.w_h);
        let b = p.param(g, self.b);
        g.lstm_cell(x, state, w_x, w_h, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::norm::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::<f32>::new();
        let lstm = Lstm::new(&mut store, "l", 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let b = &store.param(lstm.b).value;
        assert_eq!(b.data()[..4], [0.0; 4]);
        assert_eq!(b.data()[4..8], [1.0; 4]);
    }

    #[test]
    fn untracked_binding_yields_no_parameter_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, &mut rng);
        for track in [false, true] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::ones(&[2, 3]));
            let y = lin.forward(&mut g, &mut store.bind(Mode::Train, track), x).unwrap();
            let l = g.sum(y);
            let grads = g.backward(l).unwrap();
            store.zero_grad();
            store.accumulate(&g, &grads);
            let bias_grad = store.param(lin.b).grad.data().to_vec();
            assert_eq!(bias_grad, if track { vec![2.0, 2.0] } else { vec![0.0, 0.0] });
        }
    }

    #[test]
    fn accumulate_adds_without_reset() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::zeros(&mut store, "fc", 2, 1);
        for expected in [1.0, 2.0] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::ones(&[1, 2]));
            let y = lin.forward(&mut g, &mut store.bind(Mode::Infer, true), x).unwrap();
            let l = g.sum(y);
            let grads = g.backward(l).unwrap();
            store.accumulate(&g, &grads);
            assert_eq!(store.param(lin.b).grad.data(), &[expected]);
        }
    }
}
