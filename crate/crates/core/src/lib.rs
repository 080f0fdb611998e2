//! Few-shot image classification by dense pre-training and attentive
//! pooling over a nearest-centroid episodic classifier.
//!
//! The crate is layered bottom-up:
//!
//! - [`numkit`] — tensors, a tape-based autodiff graph, SGD, and a
//!   finite-difference gradient checker;
//! - [`backbone`] — small convolutional encoders producing dense feature
//!   maps;
//! - [`heads`] — pooling strategies (global average, attentive) and the
//!   nearest-centroid classifier;
//! - [`objectives`] — the pre-training and meta-finetuning losses;
//! - [`episodes`] — synthetic glyph datasets, episode sampling, and
//!   image IO;
//! - [`pipeline`] — the two training stages, evaluation, checkpoints, and
//!   the ablation/cross-domain runners;
//! - [`analysis`] — descriptor-similarity and attention-map exporters;
//! - [`selfcheck`] — built-in gradient and episode-protocol batteries.
//!
//! All numeric code is generic over the scalar type through [`Elem`];
//! training runs in `f32`, gradient verification in `f64`.

pub mod backbone;
pub mod elem;
pub mod episodes;
pub mod heads;
pub mod analysis;
pub mod objectives;
pub mod pipeline;
pub mod numkit;
pub mod rng;
pub mod selfcheck;
pub mod util;

pub use elem::Elem;

pub type Tensor32 = numkit::tensor::Tensor<f32>;
pub type Tensor64 = numkit::tensor::Tensor<f64>;
pub type Graph32 = numkit::graph::Graph<f32>;
pub type Graph64 = numkit::graph::Graph<f64>;
