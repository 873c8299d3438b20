//! Parameter naming and forward helpers shared by the encoder and towers.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParameterStore;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// `x · W + b` with `W: in × out` stored as `{name}.w` and `b: 1 × out` as `{name}.b`.
pub fn init_linear<R: Rng>(
    store: &mut ParameterStore,
    name: &str,
    inputs: usize,
    outputs: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert_normal(format!("{name}.w"), inputs, outputs, INIT_STD, rng)?;
    store.insert_constant(format!("{name}.b"), 1, outputs, 0.0)?;
    Ok(())
}

pub fn linear(tape: &mut Tape<'_>, x: Var, name: &str) -> Result<Var> {
    let w = tape.param_named(&format!("{name}.w"))?;
    let b = tape.param_named(&format!("{name}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

pub fn init_layer_norm(store: &mut ParameterStore, name: &str, dim: usize) -> Result<()> {
    store.insert_constant(format!("{name}.gamma"), 1, dim, 1.0)?;
    store.insert_constant(format!("{name}.beta"), 1, dim, 0.0)?;
    Ok(())
}

pub fn layer_norm(tape: &mut Tape<'_>, x: Var, name: &str) -> Result<Var> {
    let g = tape.param_named(&format!("{name}.gamma"))?;
    let b = tape.param_named(&format!("{name}.beta"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// One hidden ReLU layer: `{name}.fc1`, `{name}.fc2`.
pub fn init_mlp<R: Rng>(
    store: &mut ParameterStore,
    name: &str,
    inputs: usize,
    hidden: usize,
    outputs: usize,
    rng: &mut R,
) -> Result<()> {
    init_linear(store, &format!("{name}.fc1"), inputs, hidden, rng)?;
    init_linear(store, &format!("{name}.fc2"), hidden, outputs, rng)
}

pub fn mlp(tape: &mut Tape<'_>, x: Var, name: &str) -> Result<Var> {
    let h = linear(tape, x, &format!("{name}.fc1"))?;
    let h = tape.relu(h);
    linear(tape, h, &format!("{name}.fc2"))
}
