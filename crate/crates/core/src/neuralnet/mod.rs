//! A small convolutional classifier for 128x64 patellar crops, with exact
//! backward passes and SGD-with-momentum training.
//!
//! The network is a sequence of [`Layer`]s. A forward pass records one cache
//! per layer on a [`Tape`]; the backward pass walks the tape in reverse and
//! yields the gradient of every parameter. All arithmetic is `f64` and
//! training is single-threaded, so a fixed seed reproduces the parameters
//! bit for bit.

pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use layers::{Layer, Mode};
pub use model::{cross_entropy, cross_entropy_backward, ArchDescriptor, CnnModel, Gradients, Tape};
pub use tensor::Tensor;
pub use train::{lr_at_epoch, sgd_step, train, TrainConfig, TrainOutcome};
