//! Minimal differentiable-array substrate.

mod array;
pub mod checkpoint;
pub mod layers;
mod params;
mod tape;

pub use array::Array;
pub use params::{AdamW, Gradients, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};

use rand::Rng;

/// Registers a `[fan_in, fan_out]` weight with Xavier-uniform-scaled normal init and a zero bias.
pub fn register_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) -> crate::Result<()> {
    let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
    store.register(format!("{prefix}.w"), Array::randn(fan_in, fan_out, std, rng))?;
    store.register(format!("{prefix}.b"), Array::zeros(1, fan_out))?;
    Ok(())
}

/// Applies a linear layer registered with [`register_linear`].
pub fn apply_linear(tape: &mut Tape, prefix: &str, input: Var) -> crate::Result<Var> {
    let w = tape.param(&format!("{prefix}.w"))?;
    let b = tape.param(&format!("{prefix}.b"))?;
    layers::linear(tape, input, w, b)
}
