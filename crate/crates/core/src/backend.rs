//! Parameter storage and the execution interface shared by the autodiff
//! graph and the analytic cost tracer.
//!
//! Every network block is written once against [`Backend`]. Running it on a
//! [`crate::autograd::Graph`] computes values and gradients; running it on a
//! [`crate::profiler::CostTracer`] only propagates shapes and meters
//! parameters and multiply-accumulates.

use std::fmt::Debug;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct NormBuffer<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<NormBuffer<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, channels: usize) -> BufferId {
        self.buffers.push(NormBuffer {
            name: name.into(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &NormBuffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut NormBuffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NormBuffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NormBuffer<T>] {
        &mut self.buffers
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Drop every parameter and buffer registered after the given counts.
    pub fn truncate(&mut self, params: usize, buffers: usize) {
        self.params.truncate(params);
        self.buffers.truncate(buffers);
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| NormBuffer {
                    name: b.name.clone(),
                    mean: b.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    var: b.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Registers parameters under a dotted name prefix with seeded initialization.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Float> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Kaiming-uniform with `a = sqrt(5)`: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn kaiming_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)));
        let path = self.path(name);
        self.store.add(path, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let path = self.path(name);
        self.store.add(path, Tensor::full(shape, T::from_f64_lossy(v)))
    }

    pub fn norm_buffer(&mut self, name: &str, channels: usize) -> BufferId {
        let path = self.path(name);
        self.store.add_buffer(path, channels)
    }

    /// Overwrite every element of an already registered parameter.
    pub fn fill(&mut self, id: ParamId, v: f64) {
        self.store.get_mut(id).data_mut().fill(T::from_f64_lossy(v));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Operations a network block may use. All feature maps are NCHW.
pub trait Backend<T: Float> {
    type Var: Copy + Debug;

    fn training(&self) -> bool;
    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::Var;
    fn shape(&self, v: Self::Var) -> Vec<usize>;

    fn conv2d(
        &mut self,
        x: Self::Var,
        weight: Self::Var,
        bias: Option<Self::Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self::Var>;
    fn batch_norm(
        &mut self,
        x: Self::Var,
        gamma: Self::Var,
        beta: Self::Var,
        store: &ParamStore<T>,
        buffer: BufferId,
    ) -> Result<Self::Var>;
    fn silu(&mut self, x: Self::Var) -> Self::Var;
    fn sigmoid(&mut self, x: Self::Var) -> Self::Var;
    fn add(&mut self, a: Self::Var, b: Self::Var) -> Result<Self::Var>;
    /// Elementwise product with `gate` broadcast over its unit dimensions.
    fn mul_gate(&mut self, x: Self::Var, gate: Self::Var) -> Result<Self::Var>;
    /// Concatenate along channels.
    fn concat(&mut self, xs: &[Self::Var]) -> Result<Self::Var>;
    fn upsample_nearest(&mut self, x: Self::Var, factor: usize) -> Self::Var;
    /// Stride-1 max pooling with same padding.
    fn max_pool(&mut self, x: Self::Var, kernel: usize) -> Self::Var;
    /// Reduce spatial dims to 1x1.
    fn global_pool(&mut self, x: Self::Var, kind: PoolKind) -> Self::Var;
    /// Reduce channels to 1.
    fn channel_pool(&mut self, x: Self::Var, kind: PoolKind) -> Self::Var;
    fn space_to_depth(&mut self, x: Self::Var, r: usize) -> Result<Self::Var>;
    fn depth_to_space(&mut self, x: Self::Var, r: usize) -> Result<Self::Var>;

    /// Open a named scope; the tracer attributes costs to the scope path.
    fn enter(&mut self, _name: &str) {}
    fn exit(&mut self) {}
}
