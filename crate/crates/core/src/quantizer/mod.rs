//! The sum-of-tanh parametric quantizer: relaxed training form, exact
//! inference form, level bookkeeping, interpolation and a uniform baseline.

mod layer;
mod params;

pub use layer::{
    hard_quantize, interpolate, reconstruction_levels, soft_quantize_values, stanh_gradients,
    uniform_step_quantize, QuantizerGrid, StanhGradients, StanhLayer,
};
pub use params::{attach_frozen, attach_trainable, soft_quantize, StanhParams, StanhVars};
