use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, ParamKey, Var};
use crate::ops::norm::{Mode, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named trainable tensors, their accumulated gradients, and the running
/// statistics of batch-norm layers.
///
/// Gradients only change through [`ParamStore::accumulate`] and
/// [`ParamStore::zero_grad`]; nothing resets them implicitly.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Param<T>>,
    stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            stats: self.stats.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push((name.into(), RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn stats(&self) -> &[(String, RunningStats<T>)] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [(String, RunningStats<T>)] {
        &mut self.stats
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Adds the gradients of every parameter this store contributed to
    /// `graph` (through a tracking [`Bound`]) onto the stored gradients.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (key, var) in &graph.param_vars {
            if key.store != self.uid || !key.tracked {
                continue;
            }
            if let Some(g) = grads.get(*var) {
                let p = &mut self.params[key.index];
                let acc: Vec<T> = p.grad.data().iter().zip(g.data()).map(|(&a, &b)| a + b).collect();
                p.grad = Tensor::new(p.value.shape(), acc).expect("gradient shape matches parameter");
            }
        }
    }

    /// Overwrites every parameter whose name starts with `prefix`.
    pub fn fill(&mut self, prefix: &str, value: T) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value = Tensor::full(p.value.shape(), value);
            n += 1;
        }
        n
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Makes this store's parameters available on a graph. With `track`
    /// false the parameters enter as constants and receive no gradient.
    pub fn bind(&mut self, mode: Mode, track: bool) -> Bound<'_, T> {
        Bound {
            store: self,
            mode,
            track,
        }
    }
}

pub struct Bound<'a, T> {
    store: &'a mut ParamStore<T>,
    mode: Mode,
    track: bool,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Leaf for parameter `id`; repeated calls on one graph share a node.
    pub fn param(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        let key = ParamKey {
            store: self.store.uid,
            index: id.0,
            tracked: self.track,
        };
        g.param_leaf(key, &self.store.params[id.0].value)
    }

    pub fn running_stats(&mut self, id: StatsId) -> &mut RunningStats<T> {
        &mut self.store.stats[id.0].1
    }
}
