//! A minimal reverse-mode network engine.
//!
//! Networks are sequential; a forward pass records each layer's input on a
//! [`Tape`], and the backward pass walks it in reverse applying each layer's
//! exact adjoint. That is all the differentiation the autoencoder prior and
//! the regressor need.

mod adam;
mod io;
mod layers;
mod models;
mod network;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use io::{load_network, save_network, ModelHeader, ModelKind};
pub use layers::Layer;
pub use models::{RegressorModel, ShapeModel, ShapeModelStats};
pub use network::{Network, NetworkSpec, ParamGrads, Tape};
pub use tensor::{mse, Tensor};
