//! Minimal neural network engine: dense and convolutional layers, softmax
//! cross-entropy, backpropagation to parameters and inputs, SGD training and
//! checkpoints.

mod arch;
pub mod checkpoint;
mod loss;
mod network;
mod train;

pub use arch::{is_preset, Architecture, LayerSpec, DEFAULT_DROPOUT};
pub use checkpoint::{load_model, save_model};
pub use loss::{argmax, softmax, softmax_cross_entropy};
pub use network::{Gradients, Mode, Network, Param, Wrt, EVAL_CHUNK};
pub use train::{accuracy, fit, fit_with, Augment, EpochStats, History, OptimizerConfig, Sgd};
