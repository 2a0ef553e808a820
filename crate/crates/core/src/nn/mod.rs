//! Minimal neural-network building blocks with hand-written backward passes.

mod adam;
pub mod conv;
mod layers;

pub use adam::Adam;
pub use layers::{
    sigmoid, softplus, Activation, Conv2d, ConvTranspose2d, Gradients, Init, Layer, Linear, Network, Trace,
};
