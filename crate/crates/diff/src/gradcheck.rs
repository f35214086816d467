//! Central finite-difference gradient checking in double precision.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::lstm::LstmState;
use crate::ops::conv::Padding;
use crate::ops::norm::{Mode, RunningStats};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// `max |a - n| / max(max |a|, max |n|, 1e-6)`.
///
/// Normalizing by the largest component keeps tiny entries from dominating
/// while still catching a gradient that is wrong in scale or direction.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic.iter().chain(numeric).fold(1e-6f64, |m, v| m.max(v.abs()));
    diff / scale
}

/// Indices checked for a tensor of `n` elements under an optional budget.
pub fn probe_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < n => {
            let stride = n.div_ceil(l);
            (0..n).step_by(stride).collect()
        }
        _ => (0..n).collect(),
    }
}

/// Compares analytic input gradients of a scalar function against central
/// differences.
///
/// A probe whose `x + h` or `x - h` evaluation lands on a different smooth
/// piece than `x` (see [`Graph::branch_signature`]) straddles a kink, where
/// central differences do not estimate the derivative; such probes are
/// skipped and counted. If more than `max_skip` of an input's probes are
/// skipped, the input counts as failed with infinite error.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub limit: Option<usize>,
    pub fault: Option<String>,
    pub max_skip: f64,
    /// Probes compared so far, across all runs of this checker.
    pub probes: Cell<usize>,
    /// Probes skipped at kinks so far.
    pub skipped: Cell<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: FD_STEP,
            limit: None,
            fault: None,
            max_skip: 0.05,
            probes: Cell::new(0),
            skipped: Cell::new(0),
        }
    }
}

/// Finite-difference estimates for one input or parameter tensor.
#[derive(Default)]
pub struct Probes {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
    skipped: usize,
}

impl Probes {
    /// Records one probe; `smooth` is false when it straddles a kink.
    pub fn push(&mut self, analytic: f64, plus: f64, minus: f64, step: f64, smooth: bool) {
        if smooth {
            self.analytic.push(analytic);
            self.numeric.push((plus - minus) / (2.0 * step));
        } else {
            self.skipped += 1;
        }
    }
}

impl GradCheck {
    pub fn limit(mut self, per_input: usize) -> Self {
        self.limit = Some(per_input);
        self
    }

    pub fn fault(mut self, op: Option<&str>) -> Self {
        self.fault = op.map(str::to_string);
        self
    }

    /// Folds one tensor's probes into the counters; returns its error.
    pub fn finish(&self, p: &Probes) -> f64 {
        let total = p.analytic.len() + p.skipped;
        self.probes.set(self.probes.get() + total);
        self.skipped.set(self.skipped.get() + p.skipped);
        if total > 0 && p.skipped as f64 > self.max_skip * total as f64 {
            return f64::INFINITY;
        }
        relative_error(&p.analytic, &p.numeric)
    }

    /// Maximum relative error over all inputs.
    pub fn run<F, E>(&self, inputs: &[Tensor<f64>], f: F) -> Result<f64, E>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
        E: From<crate::Error>,
    {
        let mut g = Graph::new();
        if let Some(op) = &self.fault {
            g.inject_fault(op);
        }
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let base = g.branch_signature();

        let eval = |values: &[Tensor<f64>]| -> Result<(f64, bool), E> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
            let l = f(&mut g, &vars)?;
            Ok((g.value(l).item(), g.branch_signature() == base))
        };

        let mut worst = 0.0f64;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(&g, vars[i]);
            let mut probes = Probes::default();
            let mut probe = inputs.to_vec();
            for j in probe_indices(input.numel(), self.limit) {
                let mut data = input.data().to_vec();
                data[j] = input.data()[j] + self.step;
                probe[i] = Tensor::new(input.shape(), data.clone())?;
                let (plus, same_plus) = eval(&probe)?;
                data[j] = input.data()[j] - self.step;
                probe[i] = Tensor::new(input.shape(), data)?;
                let (minus, same_minus) = eval(&probe)?;
                probes.push(analytic.data()[j], plus, minus, self.step, same_plus && same_minus);
            }
            probe[i] = input.clone();
            worst = worst.max(self.finish(&probes));
        }
        Ok(worst)
    }
}

/// Random tensor with entries uniform in `[-2, 2]`.
pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..=2.0))
}

/// `sum(y * w)` for a fixed random `w`, so every output element gets a
/// distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = random_tensor(g.shape(y), rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// One registered differentiable operation and how to exercise it.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn(&GradCheck, u64) -> Result<f64>,
}

macro_rules! case {
    ($name:expr, |$rng:ident| [$($shape:expr),*], |$g:ident, $v:ident, $r:ident| $body:expr) => {
        GradCase {
            name: $name,
            tolerance: 1e-4,
            run: |check, seed| {
                let mut $rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs = vec![$(random_tensor(&$shape, &mut $rng)),*];
                let weight_seed: u64 = $rng.gen();
                check.run(&inputs, |$g, $v| {
                    let mut $r = ChaCha8Rng::seed_from_u64(weight_seed);
                    $body
                })
            },
        }
    };
}

/// Finite-difference cases for the engine's differentiable operations.
pub fn op_cases() -> Vec<GradCase> {
    vec![
        case!("matmul", |rng| [[3, 4], [4, 2]], |g, v, r| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, &mut r)
        }),
        case!("conv2d", |rng| [[2, 3, 8, 8], [4, 3, 3, 3]], |g, v, r| {
            let y = g.conv2d(v[0], v[1], 1, Padding::Same)?;
            weighted_sum(g, y, &mut r)
        }),
        case!("conv2d_strided", |rng| [[2, 2, 9, 7], [3, 2, 5, 5]], |g, v, r| {
            let y = g.conv2d(v[0], v[1], 2, Padding::Same)?;
            weighted_sum(g, y, &mut r)
        }),
        case!("conv_transpose2d", |rng| [[2, 3, 4, 4], [3, 2, 3, 3]], |g, v, r| {
            let y = g.conv_transpose2d(v[0], v[1], 2, 1, 1)?;
            weighted_sum(g, y, &mut r)
        }),
        case!("maxpool2d", |rng| [[1, 1, 7, 7]], |g, v, r| {
            let y = g.maxpool2d(v[0], 3, 2, Padding::Same)?;
            weighted_sum(g, y, &mut r)
        }),
        case!("avgpool2d", |rng| [[2, 2, 8, 8]], |g, v, r| {
            let y = g.avgpool2d(v[0], 4)?;
            weighted_sum(g, y, &mut r)
        }),
        case!("batchnorm", |rng| [[8, 4], [4], [4]], |g, v, r| {
            let y = g.batch_norm(v[0], v[1], v[2], Mode::Train, &mut RunningStats::new(4))?;
            weighted_sum(g, y, &mut r)
        }),
        case!("batchnorm_spatial", |rng| [[3, 2, 3, 3], [2], [2]], |g, v, r| {
            let y = g.batch_norm(v[0], v[1], v[2], Mode::Train, &mut RunningStats::new(2))?;
            weighted_sum(g, y, &mut r)
        }),
        case!("batchnorm_infer", |rng| [[3, 4], [4], [4]], |g, v, r| {
            let mut stats = RunningStats {
                mean: vec![0.3, -0.2, 0.1, 0.0],
                var: vec![0.5, 2.0, 1.0, 1.5],
            };
            let y = g.batch_norm(v[0], v[1], v[2], Mode::Infer, &mut stats)?;
            weighted_sum(g, y, &mut r)
        }),
        case!("elu", |rng| [[5, 6]], |g, v, r| {
            let y = g.elu(v[0]);
            weighted_sum(g, y, &mut r)
        }),
        case!("sigmoid", |rng| [[5, 6]], |g, v, r| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, &mut r)
        }),
        case!("tanh", |rng| [[5, 6]], |g, v, r| {
            let y = g.tanh(v[0]);
            weighted_sum(g, y, &mut r)
        }),
        case!("log", |rng| [[4, 4]], |g, v, r| {
            let y = g.sigmoid(v[0]);
            let y = g.log_clamped(y, 1e-8);
            weighted_sum(g, y, &mut r)
        }),
        case!(
            "lstm_cell",
            |rng| [[2, 3], [2, 4], [2, 4], [3, 16], [4, 16], [16]],
            |g, v, r| {
                let state = LstmState { c: v[1], h: v[2] };
                let next = g.lstm_cell(v[0], state, v[3], v[4], v[5])?;
                let a = weighted_sum(g, next.c, &mut r)?;
                let b = weighted_sum(g, next.h, &mut r)?;
                g.add(a, b)
            }
        ),
        case!("softmax_cross_entropy", |rng| [[3, 5]], |g, v, _r| {
            g.softmax_cross_entropy(v[0], &[1, 4, 0])
        }),
        case!("concat_slice_crop", |rng| [[2, 3], [2, 2], [1, 2, 5, 5]], |g, v, r| {
            let c = g.concat(&[v[0], v[1]])?;
            let s = g.slice(c, 1, 3)?;
            let a = weighted_sum(g, s, &mut r)?;
            let k = g.crop2d(v[2], 1, 2, 3, 2)?;
            let b = weighted_sum(g, k, &mut r)?;
            g.add(a, b)
        }),
        case!("composite", |rng| [[2, 2, 6, 6], [3, 2, 3, 3], [12, 2]], |g, v, r| {
            let y = g.conv2d(v[0], v[1], 1, Padding::Same)?;
            let y = g.elu(y);
            let y = g.maxpool2d(y, 3, 2, Padding::Same)?;
            let y = g.flatten(y)?;
            let y = g.slice(y, 0, 12).and_then(|s| g.matmul(s, v[2]))?;
            weighted_sum(g, y, &mut r)
        }),
    ]
}
