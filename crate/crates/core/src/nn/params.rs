use rand::Rng;

use crate::error::Result;
use crate::tensor::{Grads, Scalar, Tape, Tensor, Var};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Named trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add_param(&mut self, name: String, t: Tensor<T>) -> ParamId {
        self.params.push((name, t));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: String, t: Tensor<T>) -> BufferId {
        self.buffers.push((name, t));
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].1
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].1
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Every stored tensor (parameters, then buffers) with its name.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params().chain(self.buffers())
    }

    pub fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            buffers: self.buffers.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// All trainable scalars concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.f64()))
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for (_, t) in &mut self.params {
            for v in t.data_mut() {
                *v = T::of(*it.next().expect("flat vector too short"));
            }
        }
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::of(BN_MOMENTUM);
        for u in updates {
            for (r, &b) in self.buffers[u.mean.0].1.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in self.buffers[u.var.0].1.data_mut().iter_mut().zip(&u.batch_var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are collected as updates.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// One forward pass: a tape, read-only parameters bound lazily as leaves, and
/// the batch-norm updates to apply once the step completes.
pub struct Session<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    track_params: bool,
    bound: Vec<Option<Var>>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self::with_tape(store, mode, Tape::new())
    }

    pub fn with_tape(store: &'a ParamStore<T>, mode: Mode, tape: Tape<T>) -> Self {
        Self {
            tape,
            store,
            mode,
            track_params: true,
            bound: vec![None; store.num_params()],
            bn_updates: Vec::new(),
        }
    }

    /// Bind parameters as constants (no parameter gradients).
    pub fn frozen(mut self) -> Self {
        self.track_params = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.param(id).clone(), self.track_params);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, x: Tensor<T>, requires_grad: bool) -> Var {
        self.tape.leaf(x, requires_grad)
    }

    pub fn batch_norm(&mut self, bn: &BatchNormIds, x: Var) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let s = self.tape.shape(x);
                let m = (s[0] * s[2] * s[3]) as f64;
                let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                self.bn_updates.push(BnUpdate {
                    mean: bn.mean,
                    var: bn.var,
                    batch_mean: stats.mean,
                    batch_var: stats.var.iter().map(|&v| v * T::of(correction)).collect(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = self.store;
                self.tape.batch_norm_eval(
                    x,
                    gamma,
                    beta,
                    store.buffer(bn.mean).data(),
                    store.buffer(bn.var).data(),
                    BN_EPS,
                )
            }
        }
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Parameter gradients indexed like the store; unused parameters get zeros.
    pub fn param_grads(&self, grads: &mut Grads<T>) -> Vec<Vec<T>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, b)| {
                b.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| vec![T::zero(); self.store.param(ParamId(i)).numel()])
            })
            .collect()
    }
}

/// Handles of one batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufferId,
    pub var: BufferId,
}

/// Registers freshly initialised parameters under hierarchical names.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut R,
    prefix: Vec<String>,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scoped<O>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> O) -> O {
        self.push(name);
        let o = f(self);
        self.pop();
        o
    }

    fn full(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` conv weight.
    pub fn conv_weight(&mut self, leaf: &str, shape: [usize; 4]) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = fan_in.sqrt().recip();
        let t = Tensor::uniform(&shape, -bound, bound, self.rng);
        let name = self.full(leaf);
        self.store.add_param(name, t)
    }

    pub fn bias(&mut self, leaf: &str, n: usize, fan_in: usize) -> ParamId {
        let bound = (fan_in as f64).sqrt().recip();
        let t = Tensor::uniform(&[n], -bound, bound, self.rng);
        let name = self.full(leaf);
        self.store.add_param(name, t)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], v: f32) -> ParamId {
        let name = self.full(leaf);
        self.store.add_param(name, Tensor::full(shape, v))
    }

    pub fn batch_norm(&mut self, c: usize) -> BatchNormIds {
        let gamma = self.constant("bn.weight", &[c], 1.0);
        let beta = self.constant("bn.bias", &[c], 0.0);
        let mean_name = self.full("bn.running_mean");
        let var_name = self.full("bn.running_var");
        let mean = self.store.add_buffer(mean_name, Tensor::zeros(&[c]));
        let var = self.store.add_buffer(var_name, Tensor::full(&[c], 1.0));
        BatchNormIds {
            gamma,
            beta,
            mean,
            var,
        }
    }
}
