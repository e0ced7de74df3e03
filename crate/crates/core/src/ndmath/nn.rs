//! Multilayer perceptrons and the plain ReLU recurrent cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tape::{Activation, BoundParams, Tape, Var};
use crate::error::{Error, Result};

/// Layer widths `[in, h1, ..., out]` and one nonlinearity per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid MLP widths {widths:?}")));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers but {} nonlinearities",
                widths.len() - 1,
                activations.len()
            )));
        }
        Ok(Self { widths, activations })
    }

    pub fn layers(&self) -> usize {
        self.activations.len()
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect()
}

/// An MLP whose parameters live in a store under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    prefix: String,
    spec: MlpSpec,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, spec: MlpSpec) -> Self {
        Self {
            prefix: prefix.into(),
            spec,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.bias", self.prefix)
    }

    /// Registers glorot weights and zero biases.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        for l in 0..self.spec.layers() {
            let (fan_in, fan_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
            store.insert(
                &self.weight_name(l),
                &[fan_out, fan_in],
                glorot_uniform(rng, fan_in, fan_out),
            )?;
            store.insert(&self.bias_name(l), &[fan_out], vec![0.0; fan_out])?;
        }
        Ok(())
    }

    /// Affine map then nonlinearity, layer by layer.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, input: Var) -> Result<Var> {
        let mut h = input;
        for (l, &act) in self.spec.activations.iter().enumerate() {
            let (cols, rows) = (self.spec.widths[l], self.spec.widths[l + 1]);
            let w = params.get(&self.weight_name(l))?;
            let b = params.get(&self.bias_name(l))?;
            let context = format!("{} layer {l}", self.prefix);
            let a = tape.affine(&context, w, Some(b), h, rows, cols)?;
            h = tape.activation(act, a);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// `h_t = ReLU(W_h h_{t-1} + W_x x_t + b)`, `h_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rnn {
    prefix: String,
    input: usize,
    hidden: usize,
}

impl Rnn {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        store.insert(
            &self.name("w_x"),
            &[self.hidden, self.input],
            glorot_uniform(rng, self.input, self.hidden),
        )?;
        store.insert(
            &self.name("w_h"),
            &[self.hidden, self.hidden],
            glorot_uniform(rng, self.hidden, self.hidden),
        )?;
        store.insert(&self.name("b"), &[self.hidden], vec![0.0; self.hidden])?;
        Ok(())
    }

    /// Hidden states in consumption order; a backward pass consumes `inputs`
    /// from last to first. The final state is the last element.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        inputs: &[Var],
        direction: Direction,
    ) -> Result<Vec<Var>> {
        if inputs.is_empty() {
            return Err(Error::Domain("recurrent pass over an empty sequence".into()));
        }
        let w_x = params.get(&self.name("w_x"))?;
        let w_h = params.get(&self.name("w_h"))?;
        let b = params.get(&self.name("b"))?;
        let order: Vec<Var> = match direction {
            Direction::Forward => inputs.to_vec(),
            Direction::Backward => inputs.iter().rev().copied().collect(),
        };
        let mut states = Vec::with_capacity(order.len());
        let mut prev: Option<Var> = None;
        for x in order {
            let mut pre = tape.affine(&self.prefix, w_x, Some(b), x, self.hidden, self.input)?;
            if let Some(h) = prev {
                let rec = tape.affine(&self.prefix, w_h, None, h, self.hidden, self.hidden)?;
                pre = tape.add(pre, rec)?;
            }
            let h = tape.activation(Activation::Relu, pre);
            states.push(h);
            prev = Some(h);
        }
        Ok(states)
    }
}
