//! Named parameter storage and the two parameterized layer kinds.

use rand::Rng as _;

use crate::autograd::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Trainable tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<NamedParam<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(NamedParam {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter on `tape`, as trainable leaves or as
    /// constants for inference.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Replaces all values, checking names and shapes against the current
    /// layout.
    pub fn load_values(&mut self, values: Vec<NamedParam<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::load(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (slot, new) in self.params.iter().zip(&values) {
            if slot.name != new.name || slot.value.shape() != new.value.shape() {
                return Err(Error::load(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    new.name,
                    new.value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
        }
        self.params = values;
        Ok(())
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in [`ParamStore`] declaration order, e.g. leaves created by
    /// a gradient checker.
    pub fn new(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients in declaration order; parameters the loss did not reach
    /// get zeros.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.0
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}

/// Uniform fan-in initialization, `U(-b, b)` with `b = gain / sqrt(fan_in)`.
pub fn init_uniform<T: Scalar>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Tensor<T> {
    let bound = gain / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated buffer")
}

/// Gain for layers followed by ReLU.
pub const RELU_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)
/// Gain giving unit-variance outputs for unit-variance inputs.
pub const LINEAR_GAIN: f64 = 1.732_050_807_568_877_2; // sqrt(3)

#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let k = store.add(
            format!("{name}.kernel"),
            init_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, gain, rng),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Conv {
            kernel: k,
            bias: b,
            stride,
            padding,
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            p.var(self.kernel),
            Some(p.var(self.bias)),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        with_bias: bool,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(&[input, output], input, gain, rng),
        );
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[output])));
        Dense { weight, bias }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}
