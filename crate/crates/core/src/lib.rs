//! Residual log-dense U-Net for binary sea/land segmentation.
//!
//! The crate bundles a small reverse-mode autodiff engine over 4-D tensors,
//! the layer vocabulary and network built on it, connectivity analysis of
//! dense skip schemes, Adamax training, synthetic data and pixel metrics.
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the usual 64-bit choice.
//!
//! ```
//! use rdunet::{build_network, NetworkConfig, Tensor64};
//!
//! let mut model = build_network::<f64>(NetworkConfig::desk(), 1).unwrap();
//! let x = Tensor64::zeros(model.input_shape(1));
//! let mask = model.predict(&x).unwrap();
//! assert_eq!(mask.len(), 64 * 64);
//! ```

pub mod checkpoint;
pub mod connectivity;
pub mod data;
pub mod dense_block;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use connectivity::{ConnectivityGraph, Scheme};
pub use dense_block::{DenseBlock, DenseBlockConfig};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use layers::Mode;
pub use metrics::ConfusionMatrix;
pub use network::{build_network, count_params_and_flops, layer_plan, Model, NetworkConfig};
pub use params::{ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
pub use training::{train, AdamaxState, LrSchedule, TrainingConfig};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type ParamStore64 = ParamStore<f64>;
