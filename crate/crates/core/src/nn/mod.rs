//! Differentiation engine, fully connected networks and Adam.

mod adam;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, Optimizer};
pub use mlp::{init_mlp, mlp_forward, spec_from_layout, Activation, Mlp, MlpSpec};
pub use params::{polyak_update, ParamVector, Segment};
pub use tape::{
    huber_slope, huber_value, quantile_huber_rho, quantile_huber_rho_slope, Gradients, ParamVars, Tape, Var,
};
pub use tensor::{matmul, Matrix};

use alloc::vec::Vec;

use crate::error::Result;

/// Value and gradient of a scalar loss with respect to every entry of
/// `params`, by one reverse sweep over the recorded tape.
pub fn loss_gradients(
    params: &ParamVector,
    loss: impl FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = tape.params(params, true);
    let root = loss(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    Ok((tape.scalar(root), grads.flatten(&vars, params)))
}
