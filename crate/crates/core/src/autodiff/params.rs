use rand::Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Leaky rectifier with slope [`Activation::LEAKY_SLOPE`] below zero.
    LeakyRelu,
    None,
}

impl Activation {
    pub const LEAKY_SLOPE: f64 = 0.2;
}

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Owned, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.tensors.push(t);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a Glorot-uniform weight and a zero bias.
    pub fn add_mlp<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> MlpParams {
        let limit = (6.0 / (d_in + d_out).max(1) as f64).sqrt();
        let w: Vec<T> = (0..d_in * d_out)
            .map(|_| T::of(rng.gen_range(-limit..=limit)))
            .collect();
        let weight = self.add(
            format!("{name}.weight"),
            Tensor {
                shape: vec![d_in, d_out],
                data: w,
            },
        );
        let bias = self.add(format!("{name}.bias"), Tensor::zeros(vec![d_out]));
        MlpParams {
            weight,
            bias,
            activation,
            d_in,
            d_out,
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
        }
    }

    /// Replaces all tensors, checking that shapes are unchanged.
    pub fn load(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape != new.shape {
                return Err(Error::Shape(format!(
                    "parameter {} ({}) has shape {:?}, checkpoint holds {:?}",
                    i, self.names[i], old.shape, new.shape
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Parameters registered as tape inputs for one forward pass.
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T: Real> Bound<T> {
    pub fn new(tape: &Tape<T>, store: &ParamStore<T>) -> Self {
        Bound {
            vars: store.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Binds caller-owned variables, one per store tensor in order.
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

/// A shared pointwise layer `act(x @ weight + bias)`.
///
/// Normalization is not part of the layer; a normalization step would slot in
/// between the affine map and the activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub d_in: usize,
    pub d_out: usize,
}

impl MlpParams {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.linear(x, p.get(self.weight), p.get(self.bias), self.activation)
    }
}

/// [`Tape::linear`] applied with a layer's bound parameters.
pub fn linear_pointwise<T: Real>(
    tape: &Tape<T>,
    x: &Var<T>,
    layer: &MlpParams,
    p: &Bound<T>,
) -> Result<Var<T>> {
    layer.forward(tape, p, x)
}
