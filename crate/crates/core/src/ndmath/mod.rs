//! Dense-vector math and reverse-mode differentiation for the small networks
//! in the runtime model: MLPs, a ReLU recurrent cell, parameter stores, Adam.

mod adam;
mod nn;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use nn::{glorot_uniform, Direction, Mlp, MlpSpec, Rnn};
pub use params::{Param, ParameterStore};
pub use tape::{sigmoid, softplus, softplus_inverse, Activation, BoundParams, Gradients, Tape, Var};
