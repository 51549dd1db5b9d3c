use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Ones,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, decay: bool, rng: &mut ChaCha8Rng) -> ParamId {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Ones => vec![T::ONE; numel],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..numel).map(|_| T::from_f64(dist.sample(rng))).collect()
            }
        };
        self.params.push(Param { name: name.into(), value: Tensor::new(shape, data).expect("shape matches"), decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a leaf on `tape`, in store order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }

    /// Replaces parameter values by name; every name and shape must match.
    pub fn load(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Data(format!("expected {} tensors, got {}", self.params.len(), named.len())));
        }
        for (name, value) in named {
            let id = self.find(&name).ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
            let slot = &mut self.params[id.0];
            if slot.value.shape() != value.shape() {
                return Err(Error::Data(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = value;
        }
        Ok(())
    }
}

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::tensor::rng_key(&[seed, 0x1_417]))
}
