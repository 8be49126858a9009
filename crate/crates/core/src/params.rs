//! Named parameter storage and the per-forward binding of parameters to
//! tape leaves.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AdamConfig, AdamState, Gradients, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ConvSpec, NormMode, Scalar, Shape4, Tensor4};

/// Trainable parameters, batch-norm running statistics and optimizer state,
/// all keyed by hierarchical names in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub params: IndexMap<String, Tensor4<T>>,
    pub buffers: IndexMap<String, Tensor4<T>>,
    pub adam: AdamState<T>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            adam: AdamState::new(AdamConfig::default()),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor4<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor4<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate buffer name {name}")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor4<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor4<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor4<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing buffer {name}")))
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor4::numel).sum()
    }

    /// Overwrites buffers with running statistics produced by a train-mode
    /// forward pass.
    pub fn apply_stat_updates(&mut self, updates: IndexMap<String, Tensor4<T>>) -> Result<()> {
        for (name, value) in updates {
            let slot = self
                .buffers
                .get_mut(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing buffer {name}")))?;
            if slot.shape() != value.shape() {
                return Err(shape_err!("buffer {name} is {} but update is {}", slot.shape(), value.shape()));
            }
            *slot = value;
        }
        Ok(())
    }

    /// Fresh Adam moments for the current parameter set.
    pub fn reset_optimizer(&mut self, config: AdamConfig) -> Result<()> {
        self.adam = AdamState::with_params(config, &self.params)?;
        Ok(())
    }

    /// One Adam step over all parameters that received a gradient.
    pub fn adam_step(&mut self, grads: &IndexMap<String, Tensor4<T>>) -> Result<()> {
        self.adam.step(&mut self.params, grads)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let cast_map = |m: &IndexMap<String, Tensor4<T>>| {
            m.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect::<IndexMap<_, _>>()
        };
        ParamStore {
            params: cast_map(&self.params),
            buffers: cast_map(&self.buffers),
            adam: AdamState {
                config: self.adam.config,
                t: self.adam.t,
                m: cast_map(&self.adam.m),
                v: cast_map(&self.adam.v),
            },
        }
    }
}

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in (−√(6/fan_in), √(6/fan_in)), sampled in 64-bit.
    pub fn kaiming_uniform<T: Scalar>(&mut self, shape: Shape4, fan_in: usize) -> Tensor4<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| T::of(self.rng.gen_range(-bound..bound)))
            .collect();
        Tensor4::from_parts(shape, data)
    }

    /// Declares `{prefix}.weight` of shape (out, in, kh, kw) and a zero `{prefix}.bias`.
    pub fn conv<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        prefix: &str,
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
    ) -> Result<()> {
        let w = self.kaiming_uniform(Shape4::new(out_ch, in_ch, kh, kw), in_ch * kh * kw);
        store.insert_param(format!("{prefix}.weight"), w)?;
        store.insert_param(format!("{prefix}.bias"), Tensor4::zeros([1, out_ch, 1, 1])?)
    }

    /// Transposed-conv weight of shape (in, out, k, k); fan-in counts the
    /// input taps that reach one output pixel, in·k²/s².
    pub fn conv_transpose<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
    ) -> Result<()> {
        let fan_in = (in_ch * k * k / (stride * stride)).max(1);
        let w = self.kaiming_uniform(Shape4::new(in_ch, out_ch, k, k), fan_in);
        store.insert_param(format!("{prefix}.weight"), w)?;
        store.insert_param(format!("{prefix}.bias"), Tensor4::zeros([1, out_ch, 1, 1])?)
    }

    /// γ = 1, β = 0, running mean 0, running variance 1.
    pub fn batch_norm<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
        store.insert_param(format!("{prefix}.gamma"), Tensor4::full([1, c, 1, 1], T::one())?)?;
        store.insert_param(format!("{prefix}.beta"), Tensor4::zeros([1, c, 1, 1])?)?;
        store.insert_buffer(format!("{prefix}.running_mean"), Tensor4::zeros([1, c, 1, 1])?)?;
        store.insert_buffer(format!("{prefix}.running_var"), Tensor4::full([1, c, 1, 1], T::one())?)
    }
}

/// Binds a [`ParamStore`] to one tape for a single forward pass.
///
/// Each parameter becomes a leaf the first time it is used; train-mode
/// batch norm records new running statistics without touching the store.
pub struct Session<'a, T> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    mode: NormMode,
    leaves: IndexMap<String, Var>,
    stat_updates: IndexMap<String, Tensor4<T>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: NormMode) -> Self {
        Self {
            tape,
            store,
            mode,
            leaves: IndexMap::new(),
            stat_updates: IndexMap::new(),
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn input(&mut self, value: Tensor4<T>) -> Var {
        self.tape.leaf(value)
    }

    /// Leaf holding the named parameter.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let value = self.store.param(name)?.clone();
        let v = self.tape.leaf(value);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses an existing variable in place of the named parameter, so a
    /// gradient check can differentiate with respect to it.
    pub fn bind_param(&mut self, name: &str, var: Var) -> Result<()> {
        let expect = self.store.param(name)?.shape();
        if self.tape.value(var).shape() != expect {
            return Err(shape_err!(
                "binding {name} expects {expect}, got {}",
                self.tape.value(var).shape()
            ));
        }
        self.leaves.insert(name.to_string(), var);
        Ok(())
    }

    /// Convolution with `{prefix}.weight` and `{prefix}.bias`.
    pub fn conv(&mut self, x: Var, prefix: &str, spec: ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, Some(b), spec)
    }

    pub fn conv_transpose(&mut self, x: Var, prefix: &str, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.conv_transpose2d(x, w, Some(b), stride)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        let rm = self.store.buffer(&mean_key)?;
        let rv = self.store.buffer(&var_key)?;
        let (y, running) = self.tape.batch_norm(x, gamma, beta, self.mode, rm.data(), rv.data())?;
        if let Some((m, v)) = running {
            let shape = rm.shape();
            self.stat_updates.insert(mean_key, Tensor4::from_vec(shape, m)?);
            self.stat_updates.insert(var_key, Tensor4::from_vec(shape, v)?);
        }
        Ok(y)
    }

    /// Gradients of every parameter used so far, keyed by name.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> IndexMap<String, Tensor4<T>> {
        let mut out = IndexMap::new();
        for (name, &v) in &self.leaves {
            if let Some(g) = grads.take(v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    pub fn stat_updates(&self) -> &IndexMap<String, Tensor4<T>> {
        &self.stat_updates
    }

    pub fn into_stat_updates(self) -> IndexMap<String, Tensor4<T>> {
        self.stat_updates
    }
}
