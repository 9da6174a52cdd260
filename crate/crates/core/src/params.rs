//! Named parameter collections and their binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::conv::ConvSpec;
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, ValueId};
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor4<T>,
    /// Learnable entries are optimised; the rest (running statistics) are
    /// updated by the forward pass.
    pub learnable: bool,
}

/// Parameters in declaration order with unique names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleParams<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ModuleParams<T> {
    fn default() -> Self {
        ModuleParams {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ModuleParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor4<T>, learnable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            learnable,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4<T>> {
        Ok(&self.entries[self.position(name)?].tensor)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor4<T>) -> Result<()> {
        let i = self.position(name)?;
        let old = self.entries[i].tensor.dims();
        if tensor.dims() != old {
            return Err(Error::shape(format!(
                "parameter {name} is {old}, got {}",
                tensor.dims()
            )));
        }
        self.entries[i].tensor = tensor;
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.learnable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModuleParams<U> {
        ModuleParams {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    learnable: e.learnable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Records every entry on `tape`: learnable ones as leaves, the rest as
    /// constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|e| {
                if e.learnable {
                    tape.leaf(e.tensor.clone())
                } else {
                    tape.constant(e.tensor.clone())
                }
            })
            .collect();
        Bound {
            ids,
            index: self.index.clone(),
        }
    }

    /// Wraps ids already recorded for these entries, in declaration order.
    pub fn bind_ids(&self, ids: Vec<ValueId>) -> Result<Bound> {
        if ids.len() != self.entries.len() {
            return Err(Error::shape(format!(
                "{} ids for {} parameters",
                ids.len(),
                self.entries.len()
            )));
        }
        Ok(Bound {
            ids,
            index: self.index.clone(),
        })
    }

    /// Writes train-mode running statistics from `tape` back into `self`.
    pub fn apply_stat_updates(&mut self, bound: &Bound, tape: &Tape<T>) -> Result<()> {
        let by_id: HashMap<ValueId, usize> = bound.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        for (id, t) in tape.stat_updates() {
            let i = *by_id.get(id).ok_or(Error::UnknownId(id.index()))?;
            self.entries[i].tensor = t.clone();
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ModuleParams`].
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<ValueId>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<ValueId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> &[ValueId] {
        &self.ids
    }

    /// Gradients aligned with parameter declaration order (`None` for
    /// non-learnable entries).
    pub fn collect_grads<T: Scalar>(
        &self,
        params: &ModuleParams<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        params
            .entries()
            .iter()
            .zip(&self.ids)
            .map(|(e, &id)| {
                if e.learnable {
                    grads.take(id).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }
}

/// How a convolution's weight is initialised. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvInit {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zero,
    /// Centre tap maps each input channel to the same output channel.
    Identity,
}

/// Declares parameters under a dotted name prefix, drawing random
/// initial values from a seeded stream.
pub struct ParamInit<'a, T> {
    params: &'a mut ModuleParams<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

/// Joins name segments with dots, skipping empty ones.
pub fn join(prefix: &str, name: &str) -> String {
    match (prefix.is_empty(), name.is_empty()) {
        (true, _) => name.to_string(),
        (_, true) => prefix.to_string(),
        _ => format!("{prefix}.{name}"),
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

impl<'a, T: Scalar> ParamInit<'a, T> {
    pub fn new(params: &'a mut ModuleParams<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamInit {
            params,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamInit<'_, T> {
        ParamInit {
            prefix: join(&self.prefix, name),
            params: self.params,
            rng: self.rng,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn tensor(&mut self, name: &str, t: Tensor4<T>, learnable: bool) -> Result<()> {
        self.params.push(join(&self.prefix, name), t, learnable)
    }

    pub fn uniform(&mut self, dims: Dims, bound: f64) -> Tensor4<T> {
        let data = (0..dims.len())
            .map(|_| T::lit(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor4::from_vec(dims, data).expect("length matches dims")
    }

    /// Declares `<name>.weight` and, when the spec has one, `<name>.bias`.
    pub fn conv(&mut self, name: &str, spec: &ConvSpec, init: ConvInit) -> Result<()> {
        spec.validate()?;
        let wd = spec.weight_dims();
        let w = match init {
            ConvInit::FanIn => {
                let fan_in = wd.c * wd.h * wd.w;
                self.uniform(wd, 1.0 / (fan_in as f64).sqrt())
            }
            ConvInit::Zero => Tensor4::zeros(wd),
            ConvInit::Identity => identity_kernel(spec)?,
        };
        self.tensor(&join(name, "weight"), w, true)?;
        if spec.bias {
            self.tensor(&join(name, "bias"), Tensor4::zeros(spec.bias_dims()), true)?;
        }
        Ok(())
    }

    /// Declares `gamma`, `beta`, `running_mean`, `running_var` under `name`.
    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<()> {
        let d = Dims::new(1, channels, 1, 1);
        self.tensor(&join(name, "gamma"), Tensor4::full(d, T::one()), true)?;
        self.tensor(&join(name, "beta"), Tensor4::zeros(d), true)?;
        self.tensor(&join(name, "running_mean"), Tensor4::zeros(d), false)?;
        self.tensor(&join(name, "running_var"), Tensor4::full(d, T::one()), false)
    }
}

fn identity_kernel<T: Scalar>(spec: &ConvSpec) -> Result<Tensor4<T>> {
    if spec.in_channels != spec.out_channels || spec.groups != 1 || spec.kernel.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "identity init needs equal channels, one group and an odd kernel: {spec:?}"
        )));
    }
    let c = spec.kernel / 2;
    Ok(Tensor4::from_fn(spec.weight_dims(), |o, i, y, x| {
        if o == i && y == c && x == c {
            T::one()
        } else {
            T::zero()
        }
    }))
}
