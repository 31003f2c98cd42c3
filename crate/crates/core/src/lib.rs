//! Dual channel/temporal attention networks for wearable-sensor human
//! activity recognition.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`graph`]), the attention submodules ([`attention`]), plain and
//! residual convolutional backbones ([`model`]), sensor windowing and a
//! synthetic activity generator ([`data`]), and the training loop with
//! Adam and step-decay ([`train`]).
//!
//! ```no_run
//! use danhar::data::{normalize, split, synth_generate, SplitPolicy, SynthConfig};
//! use danhar::train::{evaluate, train, TrainConfig};
//! use danhar::{AttentionConfig, AttentionVariant, Model, ModelConfig};
//!
//! # fn main() -> danhar::Result<()> {
//! let data = synth_generate(&SynthConfig::default())?;
//! let (tr, te) = split(&data, &SplitPolicy::Random { fraction: 0.8, seed: 0 })?;
//! let (tr, te, _) = normalize(&tr, &te)?;
//! let model = Model::build(ModelConfig {
//!     channel_plan: vec![8, 8, 16, 16, 32, 32],
//!     num_classes: 4,
//!     window_length: 64,
//!     attention: AttentionConfig::with_variant(AttentionVariant::ChannelThenTemporal),
//!     ..ModelConfig::default()
//! })?;
//! let out = train(model, &tr, &te, &TrainConfig { epochs: 30, batch_size: 32, ..TrainConfig::default() })?;
//! println!("{:?}", evaluate(&out.best_model, &te)?.accuracy);
//! # Ok(())
//! # }
//! ```

pub mod attention;
pub mod checkpoint;
pub mod container;
pub mod error;
pub mod graph;
pub mod data;
mod kernels;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use attention::{AttentionConfig, AttentionTrace, AttentionVariant};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Mode, PoolKind, Var};
pub use kernels::Padding;
pub use model::{Backbone, Model, ModelConfig};
pub use tensor::Tensor;
