//! Named parameter storage and per-pass binding onto a [`Tape`].
//!
//! Stored values are kept representable in `f32` so that checkpoints,
//! which hold `f32` payloads, reload to bit-identical parameters.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mut value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        value.quantize_f32();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.names.len() - 1);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Overwrite a value, rounding to `f32` precision.
    pub fn set(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        self.values[id.0].expect_same_shape(&value, "param set")?;
        value.quantize_f32();
        self.values[id.0] = value;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform,
    /// Uniform in `±sqrt(1 / fan_in)`.
    LecunUniform,
    Zeros,
}

/// Creates parameters for a fresh model, or looks them up in a loaded
/// store and checks their shapes.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl<'a> ParamBuilder<'a> {
    pub fn fresh(store: &'a mut ParamStore, rng: ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng: Some(rng),
        }
    }

    pub fn loaded(store: &'a mut ParamStore) -> Self {
        ParamBuilder { store, rng: None }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init, fan_in: usize) -> Result<ParamId> {
        match &mut self.rng {
            Some(rng) => {
                let bound = match init {
                    Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
                    Init::LecunUniform => (1.0 / fan_in as f64).sqrt(),
                    Init::Zeros => 0.0,
                };
                let len = shape.iter().product();
                let data = (0..len)
                    .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
                    .collect();
                self.store.insert(name, Tensor::from_vec(shape, data)?)
            }
            None => {
                let id = self
                    .store
                    .id(name)
                    .ok_or_else(|| Error::Version(format!("missing parameter {name}")))?;
                if self.store.get(id).shape() != shape {
                    return Err(Error::Version(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        self.store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }

    /// Like [`tensor`](Self::tensor) but filled with a constant when fresh.
    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        if self.rng.is_some() {
            self.store.insert(name, Tensor::full(shape, value))
        } else {
            self.tensor(name, shape, Init::Zeros, 1)
        }
    }

    /// Modify a freshly created value in place. Does nothing when loading.
    pub fn adjust(&mut self, id: ParamId, f: impl FnOnce(&mut Tensor)) {
        if self.rng.is_some() {
            let value = &mut self.store.values[id.0];
            f(value);
            value.quantize_f32();
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        init: Init,
    ) -> Result<Conv2dLayer> {
        let fan_in = cin * k * k;
        let weight = self.tensor(&format!("{name}.weight"), &[cout, cin, k, k], init, fan_in)?;
        let bias = self.tensor(&format!("{name}.bias"), &[cout], Init::Zeros, fan_in)?;
        Ok(Conv2dLayer {
            weight,
            bias,
            pad: k / 2,
        })
    }
}

/// Stride-1 "same" convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn forward<'t>(&self, params: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(params.var(self.weight), params.var(self.bias), 1, self.pad)
    }
}

/// Binds stored parameters to tape leaves for one forward/backward pass.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'t>>>>,
    trainable: Vec<bool>,
}

impl<'t, 's> Binder<'t, 's> {
    /// Parameters for which `trainable(name)` is false are bound as
    /// constants and receive no gradient.
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        Binder {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable: store.names.iter().map(|n| trainable(n)).collect(),
        }
    }

    /// Every parameter bound as a constant.
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::new(tape, store, |_| false)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.trainable[id.0] {
                self.tape.leaf(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    /// Bind `id` to `value` instead of the stored tensor, without the `f32`
    /// rounding of [`ParamStore::set`]. Must precede any use of `id`.
    pub fn bind_value(&self, id: ParamId, value: Tensor) -> Result<()> {
        self.store.get(id).expect_same_shape(&value, "bind_value")?;
        let mut vars = self.vars.borrow_mut();
        if vars[id.0].is_some() {
            return Err(Error::Usage(format!("{} is already bound", self.store.name(id))));
        }
        vars[id.0] = Some(if self.trainable[id.0] {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        });
        Ok(())
    }

    /// Gradient per stored parameter, zeros where none reached it.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Tensor> {
        let vars = self.vars.borrow();
        self.store
            .ids()
            .map(|id| {
                vars[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect()
    }
}
